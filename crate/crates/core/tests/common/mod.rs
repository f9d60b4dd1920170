#![allow(dead_code)]

use std::collections::BTreeSet;

use doge_core::model::{
    forward_pass, per_example_mask_gradients, ElementId, EncoderParams, ForwardOptions, MaskSet, ModelConfig,
    TaskKind, Targets, TokenBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn loss(params: &EncoderParams, masks: &MaskSet, batch: &TokenBatch, targets: &Targets) -> f64 {
    let mut m = masks.clone();
    m.set_tracked(false);
    let mut pass = forward_pass(params, &m, batch, ForwardOptions::default()).unwrap();
    let l = pass.loss(targets).unwrap();
    pass.tape.value(l).item()
}

pub fn param_grads(params: &EncoderParams, masks: &MaskSet, batch: &TokenBatch, targets: &Targets) -> Vec<Vec<f64>> {
    let mut m = masks.clone();
    m.set_tracked(false);
    let opts = ForwardOptions { track_params: true, ..Default::default() };
    let mut pass = forward_pass(params, &m, batch, opts).unwrap();
    let l = pass.loss(targets).unwrap();
    let grads = pass.tape.backward(l).unwrap();
    pass.param_vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| match v {
            Some(v) => grads.get(*v).unwrap().into_data(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference parameter
/// gradients over every scalar parameter.
pub fn worst_param_fd_error(
    params: &EncoderParams,
    masks: &MaskSet,
    batch: &TokenBatch,
    targets: &Targets,
    eps: f64,
) -> (f64, String) {
    let analytic = param_grads(params, masks, batch, targets);
    let names: Vec<String> = params.slots().into_iter().map(|s| s.name).collect();
    let mut p = params.clone();
    let mut worst = (0.0, String::new());
    for slot in 0..analytic.len() {
        for i in 0..analytic[slot].len() {
            let orig = p.tensors()[slot].data()[i];
            p.tensors_mut()[slot].data_mut()[i] = orig + eps;
            let up = loss(&p, masks, batch, targets);
            p.tensors_mut()[slot].data_mut()[i] = orig - eps;
            let down = loss(&p, masks, batch, targets);
            p.tensors_mut()[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(analytic[slot][i], numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{i}] analytic {} numeric {numeric}", names[slot], analytic[slot][i]));
            }
        }
    }
    worst
}

/// Worst relative error of batch-mean mask gradients against central
/// differences on the untracked mask value.
pub fn worst_mask_fd_error(
    params: &EncoderParams,
    masks: &MaskSet,
    batch: &TokenBatch,
    targets: &Targets,
    eps: f64,
) -> (f64, String) {
    let mut tracked = masks.clone();
    tracked.set_tracked(true);
    let g = per_example_mask_gradients(params, &tracked, batch, targets).unwrap();
    let mut worst = (0.0, String::new());
    for (j, id) in g.elements.iter().enumerate() {
        let mut m = masks.clone();
        m.set_tracked(false);
        let base = m.get(*id);
        m.set(*id, base + eps).unwrap();
        let up = loss(params, &m, batch, targets);
        m.set(*id, base - eps).unwrap();
        let down = loss(params, &m, batch, targets);
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(g.batch_mean[j], numeric);
        if e > worst.0 {
            worst = (e, format!("{id} analytic {} numeric {numeric}", g.batch_mean[j]));
        }
    }
    worst
}

pub fn random_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng, bsz: usize, max_len: usize) -> (TokenBatch, Targets) {
    let seqs: Vec<Vec<usize>> = (0..bsz)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
        })
        .collect();
    let targets = match cfg.task {
        TaskKind::SequenceClassification => {
            Targets::Classes((0..bsz).map(|_| rng.random_range(0..cfg.num_classes)).collect())
        }
        TaskKind::TokenTagging => Targets::Tags(
            seqs.iter().map(|s| s.iter().map(|_| rng.random_range(0..cfg.num_classes)).collect()).collect(),
        ),
    };
    (TokenBatch::from_sequences(&seqs).unwrap(), targets)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_element(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ElementId {
    let all = ElementId::all(cfg);
    all[rng.random_range(0..all.len())]
}

pub fn tiny_config(task: TaskKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_head: 4,
        d_inner: 12,
        max_len: 6,
        vocab_size: 11,
        num_classes: 3,
        task,
        seed: 0,
    }
}

/// Exhaustive oracle over every subset of `n ≤ 12` elements.
///
/// Feasible subsets remove at least `level` of the total weight and are
/// closed under the score ranking: every pruned element ranks strictly
/// before every retained one by (score, identity). Among those, the one
/// with the fewest elements (equivalently, the most retained score mass)
/// is the nested-greedy answer.
pub fn brute_force(keys: &[(f64, usize)], weights: &[u64], level: f64) -> Option<BTreeSet<usize>> {
    let n = keys.len();
    let total: u64 = weights.iter().sum();
    let mut best: Option<(usize, f64, BTreeSet<usize>)> = None;
    for mask in 0u32..(1 << n) {
        let pruned: BTreeSet<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if pruned.len() == n {
            continue;
        }
        let removed: u64 = pruned.iter().map(|i| weights[*i]).sum();
        if (removed as f64 / total as f64) < level {
            continue;
        }
        let closed = pruned.iter().all(|p| {
            (0..n).filter(|r| !pruned.contains(r)).all(|r| {
                let (kp, kr) = (keys[*p], keys[r]);
                kp.0 < kr.0 || (kp.0 == kr.0 && kp.1 < kr.1)
            })
        });
        if !closed {
            continue;
        }
        let retained: f64 = (0..n).filter(|i| !pruned.contains(i)).map(|i| keys[i].0).sum();
        let better = match &best {
            None => true,
            Some((len, mass, _)) => pruned.len() < *len || (pruned.len() == *len && retained > *mass),
        };
        if better {
            best = Some((pruned.len(), retained, pruned));
        }
    }
    best.map(|b| b.2)
}
