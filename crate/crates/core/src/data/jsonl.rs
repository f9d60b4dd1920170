use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DomainCorpus, DomainSplit, Example, Label, CLS_ID, RESERVED_IDS, UNK_ID};
use crate::error::{Error, Result};
use crate::model::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    JsonLines,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" => Ok(CorpusFormat::JsonLines),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestOptions {
    /// Ids at or above this bound become UNK. Inferred when absent.
    pub vocab_size: Option<usize>,
    pub num_classes: Option<usize>,
    /// Cap on word types kept when records carry raw text.
    pub max_text_vocab: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { vocab_size: None, num_classes: None, max_text_vocab: 30_000 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    vocab_size: usize,
    num_classes: usize,
    task: TaskKind,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default)]
    tokens: Option<Vec<usize>>,
    #[serde(default)]
    text: Option<String>,
    label: Label,
    domain: String,
    split: Split,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    tokens: &'a [usize],
    label: &'a Label,
    domain: &'a str,
    split: Split,
}

enum Body {
    Ids(Vec<usize>),
    Words(Vec<String>),
}

struct Parsed {
    line: usize,
    body: Body,
    label: Label,
    domain: String,
    split: Split,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses a JSON Lines corpus.
///
/// Each record has `tokens` (ids) or `text` (whitespace-separated words),
/// a `label` (class id, or one tag per token), a `domain` and a `split`
/// of `train`, `dev` or `test`. An optional first line `{"meta": {...}}`
/// fixes vocabulary size, class count and task.
pub fn parse_jsonl(input: &str, opts: &IngestOptions) -> Result<DomainCorpus> {
    let mut meta: Option<Meta> = None;
    let mut records = Vec::new();
    for (i, raw) in input.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
        if let Some(m) = value.get("meta") {
            if !records.is_empty() || meta.is_some() || value.as_object().is_some_and(|o| o.len() != 1) {
                return Err(parse_err(line, "meta record must be the first line and stand alone"));
            }
            meta = Some(serde_json::from_value(m.clone()).map_err(|e| parse_err(line, e.to_string()))?);
            continue;
        }
        let r: Record = serde_json::from_value(value).map_err(|e| parse_err(line, e.to_string()))?;
        let body = match (r.tokens, r.text) {
            (Some(t), None) => Body::Ids(t),
            (None, Some(s)) => Body::Words(s.split_whitespace().map(str::to_string).collect()),
            _ => return Err(parse_err(line, "record needs exactly one of `tokens` or `text`")),
        };
        if r.domain.is_empty() {
            return Err(parse_err(line, "empty domain name"));
        }
        records.push(Parsed { line, body, label: r.label, domain: r.domain, split: r.split });
    }
    if records.is_empty() {
        return Err(Error::Validation("corpus contains no records".into()));
    }

    let task = match (&meta, &records[0].label) {
        (Some(m), _) => m.task,
        (None, Label::Class(_)) => TaskKind::SequenceClassification,
        (None, Label::Tags(_)) => TaskKind::TokenTagging,
    };
    let vocab = text_vocabulary(&records, opts.max_text_vocab);

    let mut examples = Vec::with_capacity(records.len());
    let mut max_id = 0usize;
    let mut max_label = 0usize;
    for r in records {
        let label_matches = matches!(
            (&r.label, task),
            (Label::Class(_), TaskKind::SequenceClassification) | (Label::Tags(_), TaskKind::TokenTagging)
        );
        if !label_matches {
            return Err(parse_err(r.line, "label kind differs from the corpus task"));
        }
        let tokens = match r.body {
            Body::Ids(ids) => ids,
            Body::Words(words) => {
                let mut ids: Vec<usize> = words.iter().map(|w| *vocab.get(w.as_str()).unwrap_or(&UNK_ID)).collect();
                if task == TaskKind::SequenceClassification {
                    ids.insert(0, CLS_ID);
                }
                ids
            }
        };
        if tokens.is_empty() {
            return Err(parse_err(r.line, "record has no tokens"));
        }
        if let Label::Tags(t) = &r.label {
            if t.len() != tokens.len() {
                return Err(parse_err(r.line, format!("{} tags for {} tokens", t.len(), tokens.len())));
            }
        }
        max_id = max_id.max(*tokens.iter().max().unwrap_or(&0));
        max_label = max_label.max(match &r.label {
            Label::Class(c) => *c,
            Label::Tags(t) => *t.iter().max().unwrap_or(&0),
        });
        examples.push((r.split, Example { tokens, label: r.label, domain: r.domain }));
    }

    let vocab_size = meta
        .as_ref()
        .map(|m| m.vocab_size)
        .or(opts.vocab_size)
        .unwrap_or_else(|| (max_id + 1).max(RESERVED_IDS + vocab.len()));
    let num_classes = meta.as_ref().map(|m| m.num_classes).or(opts.num_classes).unwrap_or(max_label + 1);

    let mut train_domains: BTreeMap<String, DomainSplit> = BTreeMap::new();
    let mut test_domains: BTreeMap<String, Vec<Example>> = BTreeMap::new();
    for (split, mut ex) in examples {
        for t in ex.tokens.iter_mut() {
            if *t >= vocab_size {
                *t = UNK_ID;
            }
        }
        match split {
            Split::Train => train_domains.entry(ex.domain.clone()).or_default().train.push(ex),
            Split::Dev => train_domains.entry(ex.domain.clone()).or_default().dev.push(ex),
            Split::Test => test_domains.entry(ex.domain.clone()).or_default().push(ex),
        }
    }
    let corpus = DomainCorpus { train_domains, test_domains, num_classes, vocab_size, task };
    corpus.validate()?;
    Ok(corpus)
}

/// Word ids by descending train/dev frequency, ties broken alphabetically.
fn text_vocabulary(records: &[Parsed], cap: usize) -> HashMap<String, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records.iter().filter(|r| r.split != Split::Test) {
        if let Body::Words(ws) = &r.body {
            for w in ws {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    words
        .into_iter()
        .take(cap)
        .enumerate()
        .map(|(i, (w, _))| (w.to_string(), RESERVED_IDS + i))
        .collect()
}

pub fn ingest(path: &Path, format: CorpusFormat, opts: &IngestOptions) -> Result<DomainCorpus> {
    match format {
        CorpusFormat::JsonLines => parse_jsonl(&std::fs::read_to_string(path)?, opts),
    }
}

/// Canonical serialization; `parse_jsonl` reads it back unchanged.
pub fn to_jsonl(corpus: &DomainCorpus) -> String {
    let mut out = String::new();
    let meta = Meta { vocab_size: corpus.vocab_size, num_classes: corpus.num_classes, task: corpus.task };
    let mut push = |v: String| {
        out.push_str(&v);
        out.push('\n');
    };
    push(serde_json::json!({ "meta": meta }).to_string());
    let rec = |e: &Example, split| {
        serde_json::to_string(&OutRecord { tokens: &e.tokens, label: &e.label, domain: &e.domain, split })
            .expect("records serialize")
    };
    for split in corpus.train_domains.values() {
        for e in &split.train {
            push(rec(e, Split::Train));
        }
        for e in &split.dev {
            push(rec(e, Split::Dev));
        }
    }
    for exs in corpus.test_domains.values() {
        for e in exs {
            push(rec(e, Split::Test));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_records_use_frequency_vocab() {
        let src = r#"{"text":"good good film","label":1,"domain":"a","split":"train"}
{"text":"bad film","label":0,"domain":"a","split":"dev"}
{"text":"unseen film","label":0,"domain":"b","split":"test"}
"#;
        let c = parse_jsonl(src, &IngestOptions::default()).unwrap();
        // film:3, good:2, bad:1
        assert_eq!(c.train_domains["a"].train[0].tokens, vec![CLS_ID, 4, 4, 3]);
        assert_eq!(c.test_domains["b"][0].tokens, vec![CLS_ID, UNK_ID, 3]);
        assert_eq!(c.vocab_size, 6);
        assert_eq!(c.num_classes, 2);
    }

    #[test]
    fn ids_beyond_vocab_become_unk() {
        let src = r#"{"tokens":[2,5,99],"label":0,"domain":"a","split":"train"}"#;
        let opts = IngestOptions { vocab_size: Some(50), ..Default::default() };
        let c = parse_jsonl(src, &opts).unwrap();
        assert_eq!(c.train_domains["a"].train[0].tokens, vec![2, 5, UNK_ID]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let src = "{\"tokens\":[2],\"label\":0,\"domain\":\"a\",\"split\":\"train\"}\n{oops}\n";
        match parse_jsonl(src, &IngestOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_and_overlapping_corpora_rejected() {
        assert!(matches!(parse_jsonl("\n\n", &IngestOptions::default()), Err(Error::Validation(_))));
        let src = r#"{"tokens":[2],"label":0,"domain":"a","split":"train"}
{"tokens":[2],"label":0,"domain":"a","split":"test"}"#;
        assert!(matches!(parse_jsonl(src, &IngestOptions::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn tag_count_must_match_tokens() {
        let src = r#"{"tokens":[3,4],"label":[0],"domain":"a","split":"train"}"#;
        assert!(matches!(parse_jsonl(src, &IngestOptions::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn tagging_round_trip() {
        let src = r#"{"tokens":[3,4],"label":[0,2],"domain":"a","split":"train"}
{"tokens":[5],"label":[1],"domain":"z","split":"test"}"#;
        let c = parse_jsonl(src, &IngestOptions::default()).unwrap();
        assert_eq!(c.task, TaskKind::TokenTagging);
        assert_eq!(parse_jsonl(&to_jsonl(&c), &IngestOptions::default()).unwrap(), c);
    }
}
