use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ElementId, EncoderParams, MaskSet, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Token ids for a batch, right-padded with id 0 to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, seq_len - s.len()));
            lengths.push(s.len());
        }
        Ok(TokenBatch { ids, lengths, seq_len })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Same batch with every example repeated `times` times, in order.
    pub fn repeated(&self, times: usize) -> Self {
        let l = self.seq_len;
        let mut ids = Vec::new();
        let mut lengths = Vec::new();
        for (b, &len) in self.lengths.iter().enumerate() {
            for _ in 0..times {
                ids.extend_from_slice(&self.ids[b * l..(b + 1) * l]);
                lengths.push(len);
            }
        }
        TokenBatch { ids, lengths, seq_len: l }
    }
}

/// Supervision for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Tags(Vec<Vec<usize>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Tags(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn repeated(&self, times: usize) -> Self {
        match self {
            Targets::Classes(c) => {
                Targets::Classes(c.iter().flat_map(|y| std::iter::repeat_n(*y, times)).collect())
            }
            Targets::Tags(t) => {
                Targets::Tags(t.iter().flat_map(|y| std::iter::repeat_n(y.clone(), times)).collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Record parameter gradients.
    pub track_params: bool,
    /// Drop the subgraph of any untracked element whose mask is exactly 0.0
    /// instead of multiplying its output by zero.
    pub remove_pruned: bool,
    /// Dropout rate on embeddings and FFN hidden activations; 0 disables it.
    pub dropout: f64,
    pub dropout_seed: u64,
}

/// A recorded forward pass, ready for a loss and a backward sweep.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// One entry per parameter slot; `None` when the slot was not used.
    pub param_vars: Vec<Option<Var>>,
    /// Per-example mask variables (`[batch]`), present when masks are tracked.
    pub mask_vars: BTreeMap<ElementId, Var>,
    /// FFN pre-activation values `W_1 z + b_1` per layer, `[batch * seq, d_inner]`;
    /// `None` for a removed block.
    pub ffn_pre_activations: Vec<Option<Var>>,
    task: TaskKind,
    lengths: Vec<usize>,
    seq_len: usize,
}

enum Gate {
    Identity,
    Scale(f64),
    PerExample(Var),
    Removed,
}

struct Binder<'p> {
    tensors: Vec<&'p Tensor>,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl Binder<'_> {
    fn get(&mut self, tape: &mut Tape, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = tape.leaf(self.tensors[slot].clone(), self.track);
        self.vars[slot] = Some(v);
        v
    }
}

// Slot indices; must agree with `param_slots`.
const HEAD_SLOTS: usize = 7;
const LAYER_SHARED_SLOTS: usize = 9;

struct Layout {
    heads: usize,
    layers: usize,
}

impl Layout {
    fn layer_base(&self, l: usize) -> usize {
        4 + l * (self.heads * HEAD_SLOTS + LAYER_SHARED_SLOTS)
    }
    fn head(&self, l: usize, h: usize, k: usize) -> usize {
        self.layer_base(l) + h * HEAD_SLOTS + k
    }
    fn layer(&self, l: usize, k: usize) -> usize {
        self.layer_base(l) + self.heads * HEAD_SLOTS + k
    }
    fn classifier(&self, k: usize) -> usize {
        self.layer_base(self.layers) + k
    }
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 / (1.0 - self.rate);
        let n = tape.value(x).numel();
        let factors = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, factors)
    }
}

/// Runs the masked encoder and returns logits: `[batch, classes]` for
/// sequence classification, `[batch, seq, classes]` for tagging.
pub fn forward(params: &EncoderParams, masks: &MaskSet, batch: &TokenBatch) -> Result<Tensor> {
    let mut masks = masks.clone();
    masks.set_tracked(false);
    let pass = forward_pass(params, &masks, batch, ForwardOptions::default())?;
    let logits = pass.tape.value(pass.logits).clone();
    match params.config.task {
        TaskKind::SequenceClassification => Ok(logits),
        TaskKind::TokenTagging => {
            let c = params.config.num_classes;
            logits.reshaped(&[batch.batch_size(), batch.seq_len(), c])
        }
    }
}

/// Records a forward pass on a fresh tape.
///
/// Each head's summand `H_i W_O_i` and each FFN block output is multiplied
/// by its mask before the residual add. The attention output bias is added
/// to the residual stream first, so a head whose mask is zero contributes an
/// exact zero to the sum.
pub fn forward_pass(
    params: &EncoderParams,
    masks: &MaskSet,
    batch: &TokenBatch,
    opts: ForwardOptions,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    let (bsz, l) = (batch.batch_size(), batch.seq_len());
    if l > cfg.max_len {
        return Err(Error::Input(format!("sequence length {l} exceeds max_len {}", cfg.max_len)));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!("unknown token id {bad} (vocab size {})", cfg.vocab_size)));
    }
    if !masks.matches(cfg) {
        return Err(Error::Contract("mask set does not match model config".into()));
    }

    let mut tape = Tape::new();
    let layout = Layout { heads: cfg.heads, layers: cfg.layers };
    let mut bind = Binder {
        tensors: params.tensors(),
        vars: Vec::new(),
        track: opts.track_params,
    };
    bind.vars = vec![None; bind.tensors.len()];
    let mut dropout = Dropout {
        rate: opts.dropout,
        rng: (opts.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(opts.dropout_seed)),
    };

    let mut mask_vars = BTreeMap::new();
    let mut gate_for = |tape: &mut Tape, id: ElementId| -> Gate {
        let v = masks.get(id);
        if masks.is_tracked() {
            let s = tape.param(Tensor::filled(&[bsz], v));
            mask_vars.insert(id, s);
            Gate::PerExample(s)
        } else if v == 1.0 {
            Gate::Identity
        } else if v == 0.0 && opts.remove_pruned {
            Gate::Removed
        } else {
            Gate::Scale(v)
        }
    };
    let apply = |tape: &mut Tape, gate: &Gate, x: Var| -> Result<Var> {
        Ok(match gate {
            Gate::Identity => x,
            Gate::Scale(c) => tape.scale(x, *c),
            Gate::PerExample(s) => tape.group_scale(x, *s)?,
            Gate::Removed => unreachable!("removed elements are skipped"),
        })
    };

    let tok_table = bind.get(&mut tape, 0);
    let pos_table = bind.get(&mut tape, 1);
    let tok = tape.embedding(tok_table, &batch.ids)?;
    let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..l).collect();
    let pos = tape.embedding(pos_table, &pos_ids)?;
    let emb = tape.add(tok, pos)?;
    let (g, b) = (bind.get(&mut tape, 2), bind.get(&mut tape, 3));
    let mut x = tape.layer_norm(emb, g, b)?;
    x = dropout.apply(&mut tape, x)?;

    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut ffn_pre_activations = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let b_o = bind.get(&mut tape, layout.layer(layer, 0));
        let mut acc = tape.add_row(x, b_o)?;
        for h in 0..cfg.heads {
            let gate = gate_for(&mut tape, ElementId::head(layer, h));
            if matches!(gate, Gate::Removed) {
                continue;
            }
            let mut proj = |tape: &mut Tape, k: usize| -> Result<Var> {
                let w = bind.get(tape, layout.head(layer, h, k));
                let b = bind.get(tape, layout.head(layer, h, k + 1));
                let y = tape.matmul(x, w)?;
                let y = tape.add_row(y, b)?;
                tape.reshape(y, &[bsz, l, cfg.d_head])
            };
            let q = proj(&mut tape, 0)?;
            let k = proj(&mut tape, 2)?;
            let v = proj(&mut tape, 4)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_keys_masked(scores, &batch.lengths)?;
            let heads_out = tape.batch_matmul(probs, v, false)?;
            let heads_out = tape.reshape(heads_out, &[bsz * l, cfg.d_head])?;
            let w_o = bind.get(&mut tape, layout.head(layer, h, 6));
            let term = tape.matmul(heads_out, w_o)?;
            let term = apply(&mut tape, &gate, term)?;
            acc = tape.add(acc, term)?;
        }
        let (g, b) = (bind.get(&mut tape, layout.layer(layer, 1)), bind.get(&mut tape, layout.layer(layer, 2)));
        let z = tape.layer_norm(acc, g, b)?;

        let gate = gate_for(&mut tape, ElementId::ffn(layer));
        let y = if matches!(gate, Gate::Removed) {
            ffn_pre_activations.push(None);
            z
        } else {
            let w1 = bind.get(&mut tape, layout.layer(layer, 3));
            let b1 = bind.get(&mut tape, layout.layer(layer, 4));
            let pre = tape.matmul(z, w1)?;
            let pre = tape.add_row(pre, b1)?;
            ffn_pre_activations.push(Some(pre));
            let hidden = tape.gelu(pre);
            let hidden = dropout.apply(&mut tape, hidden)?;
            let w2 = bind.get(&mut tape, layout.layer(layer, 5));
            let b2 = bind.get(&mut tape, layout.layer(layer, 6));
            let out = tape.matmul(hidden, w2)?;
            let out = tape.add_row(out, b2)?;
            let out = apply(&mut tape, &gate, out)?;
            tape.add(z, out)?
        };
        let (g, b) = (bind.get(&mut tape, layout.layer(layer, 7)), bind.get(&mut tape, layout.layer(layer, 8)));
        x = tape.layer_norm(y, g, b)?;
    }

    let features = match cfg.task {
        TaskKind::SequenceClassification => {
            let first: Vec<usize> = (0..bsz).map(|b| b * l).collect();
            tape.select_rows(x, &first)?
        }
        TaskKind::TokenTagging => x,
    };
    let (w, b) = (bind.get(&mut tape, layout.classifier(0)), bind.get(&mut tape, layout.classifier(1)));
    let logits = tape.matmul(features, w)?;
    let logits = tape.add_row(logits, b)?;

    Ok(ForwardPass {
        tape,
        logits,
        param_vars: bind.vars,
        mask_vars,
        ffn_pre_activations,
        task: cfg.task,
        lengths: batch.lengths.clone(),
        seq_len: l,
    })
}

impl ForwardPass {
    /// Mean over examples of each example's loss. For tagging, an example's
    /// loss is the mean over its (unpadded) tokens.
    pub fn loss(&mut self, targets: &Targets) -> Result<Var> {
        let bsz = self.lengths.len();
        self.weighted_loss(targets, 1.0 / bsz as f64)
    }

    /// Sum over examples of each example's loss.
    pub fn summed_loss(&mut self, targets: &Targets) -> Result<Var> {
        self.weighted_loss(targets, 1.0)
    }

    fn weighted_loss(&mut self, targets: &Targets, example_weight: f64) -> Result<Var> {
        let bsz = self.lengths.len();
        if targets.len() != bsz {
            return Err(Error::shape("targets", &[bsz], &[targets.len()]));
        }
        match (self.task, targets) {
            (TaskKind::SequenceClassification, Targets::Classes(labels)) => {
                let w = vec![example_weight; bsz];
                self.tape.cross_entropy_weighted(self.logits, labels, &w)
            }
            (TaskKind::TokenTagging, Targets::Tags(tags)) => {
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                let mut weights = Vec::new();
                for (b, (&len, t)) in self.lengths.iter().zip(tags).enumerate() {
                    if t.len() != len {
                        return Err(Error::shape("tag targets", &[len], &[t.len()]));
                    }
                    for (pos, &y) in t.iter().enumerate() {
                        rows.push(b * self.seq_len + pos);
                        labels.push(y);
                        weights.push(example_weight / len as f64);
                    }
                }
                let sel = self.tape.select_rows(self.logits, &rows)?;
                self.tape.cross_entropy_weighted(sel, &labels, &weights)
            }
            _ => Err(Error::Contract("targets do not match the model task".into())),
        }
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Predicted class per example (classification) or per unpadded token
    /// (tagging), flattened in batch order.
    pub fn predictions(&self) -> Vec<Vec<usize>> {
        let logits = self.logits();
        let c = logits.cols();
        let argmax = |row: &[f64]| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        };
        let rows: Vec<&[f64]> = logits.data().chunks(c).collect();
        match self.task {
            TaskKind::SequenceClassification => rows.iter().map(|r| vec![argmax(r)]).collect(),
            TaskKind::TokenTagging => self
                .lengths
                .iter()
                .enumerate()
                .map(|(b, &len)| (0..len).map(|p| argmax(rows[b * self.seq_len + p])).collect())
                .collect(),
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

/// Per-example gradients of the loss with respect to every mask variable.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGradients {
    pub elements: Vec<ElementId>,
    /// `[example][element]`: ∂ℒ(x, y)/∂mask for each example on its own.
    pub per_example: Vec<Vec<f64>>,
    /// ∂(mean batch loss)/∂mask per element.
    pub batch_mean: Vec<f64>,
}

impl MaskGradients {
    pub fn as_map(&self) -> BTreeMap<ElementId, f64> {
        self.elements.iter().copied().zip(self.batch_mean.iter().copied()).collect()
    }
}

/// Gradient of the batch's mean loss with respect to each mask variable.
pub fn mask_gradients(
    params: &EncoderParams,
    masks: &MaskSet,
    batch: &TokenBatch,
    targets: &Targets,
) -> Result<BTreeMap<ElementId, f64>> {
    Ok(per_example_mask_gradients(params, masks, batch, targets)?.as_map())
}

/// One backward sweep yields per-example mask gradients: each mask is
/// replicated per example and the per-example losses are summed, so example
/// `b`'s copy receives exactly `∂ℒ_b/∂mask`, whatever else is in the batch.
pub fn per_example_mask_gradients(
    params: &EncoderParams,
    masks: &MaskSet,
    batch: &TokenBatch,
    targets: &Targets,
) -> Result<MaskGradients> {
    if !masks.is_tracked() {
        return Err(Error::Contract("mask gradients need tracked masks".into()));
    }
    let mut pass = forward_pass(params, masks, batch, ForwardOptions::default())?;
    let loss = pass.summed_loss(targets)?;
    let grads = pass.tape.backward(loss)?;
    let bsz = batch.batch_size();
    let elements: Vec<ElementId> = pass.mask_vars.keys().copied().collect();
    let mut per_example = vec![vec![0.0; elements.len()]; bsz];
    let mut batch_mean = vec![0.0; elements.len()];
    for (j, id) in elements.iter().enumerate() {
        let g = grads.get(pass.mask_vars[id]).expect("mask vars are tracked");
        for (b, v) in g.data().iter().enumerate() {
            per_example[b][j] = *v;
        }
        batch_mean[j] = g.sum() / bsz as f64;
    }
    Ok(MaskGradients { elements, per_example, batch_mean })
}
