use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, targets_of, Example};
use crate::error::{Error, Result};
use crate::model::{Targets, TokenBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Sequential,
    Shuffled { seed: u64, epoch: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Mixed,
    /// Every batch holds examples of a single domain.
    ByDomain,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Targets,
    /// Set when every example shares one domain.
    pub domain: Option<String>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let tokens = TokenBatch::from_sequences(&seqs)?;
        let first = &examples[0].domain;
        let domain = examples.iter().all(|e| &e.domain == first).then(|| first.clone());
        Ok(Batch { tokens, targets: targets_of(examples), domain })
    }

    pub fn len(&self) -> usize {
        self.tokens.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `examples` into batches of at most `batch_size`.
pub fn batches(examples: &[&Example], batch_size: usize, order: Order, grouping: Grouping) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = match order {
        Order::Sequential => None,
        Order::Shuffled { seed, epoch } => Some(ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch))),
    };
    let groups: Vec<Vec<&Example>> = match grouping {
        Grouping::Mixed => vec![examples.to_vec()],
        Grouping::ByDomain => {
            let mut by: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
            for e in examples {
                by.entry(e.domain.as_str()).or_default().push(e);
            }
            by.into_values().collect()
        }
    };
    let mut chunks: Vec<Vec<&Example>> = Vec::new();
    for mut g in groups {
        if let Some(r) = rng.as_mut() {
            g.shuffle(r);
        }
        chunks.extend(g.chunks(batch_size).map(|c| c.to_vec()));
    }
    if let (Some(r), Grouping::ByDomain) = (rng.as_mut(), grouping) {
        chunks.shuffle(r);
    }
    chunks.iter().map(|c| Batch::from_examples(c)).collect()
}
