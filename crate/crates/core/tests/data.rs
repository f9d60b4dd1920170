use doge_core::data::{
    generate, parse_jsonl, to_jsonl, DomainCorpus, Example, IngestOptions, Label, SyntheticLayout, SyntheticTaskSpec,
    TestSpurious,
};
use proptest::prelude::*;

fn marker_class(layout: &SyntheticLayout, ex: &Example) -> Option<usize> {
    ex.tokens.iter().find_map(|t| layout.marker_owner(*t)).map(|(_, c)| c)
}

fn label(ex: &Example) -> usize {
    match ex.label {
        Label::Class(c) => c,
        _ => unreachable!(),
    }
}

/// Pearson chi-squared statistic of the marker-class by label table.
fn chi_squared(layout: &SyntheticLayout, exs: &[&Example], k: usize) -> f64 {
    let mut table = vec![vec![0.0f64; k]; k];
    for e in exs {
        table[marker_class(layout, e).unwrap()][label(e)] += 1.0;
    }
    let n: f64 = table.iter().flatten().sum();
    let mut stat = 0.0;
    for r in 0..k {
        for c in 0..k {
            let row: f64 = table[r].iter().sum();
            let col: f64 = table.iter().map(|t| t[c]).sum();
            let expected = row * col / n;
            stat += (table[r][c] - expected).powi(2) / expected;
        }
    }
    stat
}

#[test]
fn zero_rho_makes_markers_independent_of_labels() {
    let spec = SyntheticTaskSpec { spurious_rho: 0.0, examples_per_domain: 1500, ..Default::default() };
    let corpus = generate(&spec).unwrap();
    let layout = spec.layout();
    let train = corpus.train_examples();
    // Chi-squared with 4 degrees of freedom; 18.47 is the 0.1% critical value.
    assert!(chi_squared(&layout, &train, 3) < 18.47);

    // A classifier that reads only the marker, fitted on train, is at chance on dev.
    let mut votes = vec![vec![0usize; 3]; 3];
    for e in &train {
        votes[marker_class(&layout, e).unwrap()][label(e)] += 1;
    }
    let rule: Vec<usize> =
        votes.iter().map(|v| (0..3).max_by_key(|c| (v[*c], std::cmp::Reverse(*c))).unwrap()).collect();
    let dev = corpus.dev_examples();
    let hits = dev.iter().filter(|e| rule[marker_class(&layout, e).unwrap()] == label(e)).count();
    let acc = hits as f64 / dev.len() as f64;
    assert!((acc - 1.0 / 3.0).abs() < 0.06, "marker-only accuracy {acc}");
}

#[test]
fn rho_sets_marker_label_agreement() {
    let spec = SyntheticTaskSpec { spurious_rho: 0.9, ..Default::default() };
    let corpus = generate(&spec).unwrap();
    let layout = spec.layout();
    let train = corpus.train_examples();
    let agree = train.iter().filter(|e| marker_class(&layout, e) == Some(label(e))).count() as f64;
    let rate = agree / train.len() as f64;
    let expected = 0.9 + 0.1 / 3.0;
    assert!((rate - expected).abs() < 0.02, "{rate} vs {expected}");
}

#[test]
fn markers_are_domain_specific() {
    let spec = SyntheticTaskSpec { examples_per_domain: 200, ..Default::default() };
    let corpus = generate(&spec).unwrap();
    let layout = spec.layout();
    for (d, name) in corpus.train_domain_names().iter().enumerate() {
        for e in &corpus.train_domains[name].train {
            let owners: Vec<_> = e.tokens.iter().filter_map(|t| layout.marker_owner(*t)).collect();
            assert_eq!(owners.len(), 1);
            assert_eq!(owners[0].0, d);
        }
    }
}

#[test]
fn flipped_test_markers_disagree_with_labels() {
    let spec = SyntheticTaskSpec { examples_per_domain: 600, ..Default::default() };
    let corpus = generate(&spec).unwrap();
    let layout = spec.layout();
    let test: Vec<&Example> = corpus.test_domains.values().flatten().collect();
    let flipped = test.iter().filter(|e| marker_class(&layout, e) == Some((label(e) + 1) % 3)).count() as f64;
    assert!(flipped / test.len() as f64 > 0.85);

    let absent = SyntheticTaskSpec { test_spurious: TestSpurious::Absent, ..spec };
    let corpus = generate(&absent).unwrap();
    assert!(corpus.test_domains.values().flatten().all(|e| marker_class(&layout, e).is_none()));
}

#[test]
fn signal_rule_determines_most_labels() {
    let spec = SyntheticTaskSpec { examples_per_domain: 400, ..Default::default() };
    let corpus = generate(&spec).unwrap();
    let layout = spec.layout();
    let all: Vec<&Example> = corpus.test_domains.values().flatten().collect();
    let hits = all
        .iter()
        .filter(|e| {
            let mut count = [0usize; 3];
            for t in &e.tokens {
                if let Some(c) = layout.signal_class(*t) {
                    count[c] += 1;
                }
            }
            let majority = (0..3).max_by_key(|c| count[*c]).unwrap();
            majority == label(e)
        })
        .count() as f64;
    // rule_strength + (1 - rule_strength) / k
    let expected = spec.rule_strength + (1.0 - spec.rule_strength) / 3.0;
    assert!((hits / all.len() as f64 - expected).abs() < 0.03);
}

fn small_corpus(seed: u64, rho: f64) -> DomainCorpus {
    let spec = SyntheticTaskSpec {
        train_domains: 2,
        test_domains: 1,
        examples_per_domain: 12,
        spurious_rho: rho,
        seed,
        ..Default::default()
    };
    generate(&spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jsonl_round_trip_is_exact(seed in 0u64..1000, rho in 0.0f64..1.0) {
        let c = small_corpus(seed, rho);
        let text = to_jsonl(&c);
        let back = parse_jsonl(&text, &IngestOptions::default()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(to_jsonl(&back), text);
        prop_assert_eq!(back.checksum(), c.checksum());
    }

    #[test]
    fn same_seed_same_corpus(seed in 0u64..1000) {
        prop_assert_eq!(small_corpus(seed, 0.5).checksum(), small_corpus(seed, 0.5).checksum());
    }
}
