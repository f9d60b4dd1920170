//! Multi-domain corpora: synthetic generation, JSON Lines ingest and batching.

mod batch;
mod jsonl;
mod synthetic;

pub use batch::{batches, Batch, Grouping, Order};
pub use jsonl::{ingest, parse_jsonl, to_jsonl, CorpusFormat, IngestOptions};
pub use synthetic::{generate, SyntheticLayout, SyntheticTaskSpec, TestSpurious};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::checksum::sha256_bytes;
use crate::error::{Error, Result};
use crate::model::{TaskKind, Targets};

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;
/// Token id for out-of-vocabulary input.
pub const UNK_ID: usize = 1;
/// Token id placed at position 0 of classification examples.
pub const CLS_ID: usize = 2;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED_IDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
    pub domain: String,
}

impl Example {
    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!("empty example in domain {}", self.domain)));
        }
        let ok = match &self.label {
            Label::Class(c) => *c < num_classes,
            Label::Tags(t) => t.len() == self.tokens.len() && t.iter().all(|c| *c < num_classes),
        };
        if !ok {
            return Err(Error::Validation(format!("bad label in domain {}", self.domain)));
        }
        Ok(())
    }
}

/// Train and dev examples of one training domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// Training domains (with train/dev splits) and disjoint test domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub train_domains: BTreeMap<String, DomainSplit>,
    pub test_domains: BTreeMap<String, Vec<Example>>,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub task: TaskKind,
}

impl DomainCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.train_domains.is_empty() {
            return Err(Error::Validation("corpus has no training domains".into()));
        }
        let train: BTreeSet<&String> = self.train_domains.keys().collect();
        if let Some(d) = self.test_domains.keys().find(|d| train.contains(d)) {
            return Err(Error::Validation(format!("domain {d:?} is both a training and a test domain")));
        }
        for (name, split) in &self.train_domains {
            for ex in split.train.iter().chain(&split.dev) {
                self.check_example(ex, name)?;
            }
        }
        for (name, exs) in &self.test_domains {
            for ex in exs {
                self.check_example(ex, name)?;
            }
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example, partition: &str) -> Result<()> {
        if ex.domain != partition {
            return Err(Error::Validation(format!(
                "example of domain {:?} filed under {partition:?}",
                ex.domain
            )));
        }
        if let Some(t) = ex.tokens.iter().find(|t| **t >= self.vocab_size) {
            return Err(Error::Validation(format!("token id {t} outside vocabulary")));
        }
        let label_ok = matches!(
            (&ex.label, self.task),
            (Label::Class(_), TaskKind::SequenceClassification) | (Label::Tags(_), TaskKind::TokenTagging)
        );
        if !label_ok {
            return Err(Error::Validation("label kind does not match the corpus task".into()));
        }
        ex.validate(self.num_classes)
    }

    pub fn train_domain_names(&self) -> Vec<String> {
        self.train_domains.keys().cloned().collect()
    }

    pub fn test_domain_names(&self) -> Vec<String> {
        self.test_domains.keys().cloned().collect()
    }

    /// Training examples of every training domain, domain-name order.
    pub fn train_examples(&self) -> Vec<&Example> {
        self.train_domains.values().flat_map(|s| s.train.iter()).collect()
    }

    /// The gathered development set.
    pub fn dev_examples(&self) -> Vec<&Example> {
        self.train_domains.values().flat_map(|s| s.dev.iter()).collect()
    }

    /// Examples of one domain: its training split for a training domain,
    /// its test examples for a test domain.
    pub fn domain_examples(&self, domain: &str) -> Result<Vec<&Example>> {
        if let Some(s) = self.train_domains.get(domain) {
            return Ok(s.train.iter().collect());
        }
        if let Some(t) = self.test_domains.get(domain) {
            return Ok(t.iter().collect());
        }
        Err(Error::Lookup(format!("unknown domain {domain:?}")))
    }

    /// Longest example, in tokens.
    pub fn max_len(&self) -> usize {
        let train = self.train_domains.values().flat_map(|s| s.train.iter().chain(&s.dev));
        train
            .chain(self.test_domains.values().flatten())
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0)
    }

    /// SHA-256 of the canonical JSON Lines serialization.
    pub fn checksum(&self) -> String {
        sha256_bytes(to_jsonl(self).as_bytes())
    }
}

pub(crate) fn targets_of(examples: &[&Example]) -> Targets {
    match examples.first().map(|e| &e.label) {
        Some(Label::Tags(_)) => Targets::Tags(
            examples
                .iter()
                .map(|e| match &e.label {
                    Label::Tags(t) => t.clone(),
                    Label::Class(c) => vec![*c],
                })
                .collect(),
        ),
        _ => Targets::Classes(
            examples
                .iter()
                .map(|e| match &e.label {
                    Label::Class(c) => *c,
                    Label::Tags(t) => t[0],
                })
                .collect(),
        ),
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
