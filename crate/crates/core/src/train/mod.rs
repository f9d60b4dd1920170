//! Finetuning and rewind-retraining loops with AdamW and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamState, AdamW};

use serde::{Deserialize, Serialize};

use crate::data::{batches, derive_seed, DomainCorpus, Example, Grouping, Label, Order};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_f1, predict};
use crate::model::{forward_pass, ElementId, EncoderParams, ForwardOptions, MaskSet, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    /// Accuracy for classification, macro-F1 for tagging.
    Auto,
    Accuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once more than this many consecutive epochs fail to
    /// improve the dev metric.
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub seed: u64,
    pub metric: SelectionMetric,
    /// Optimizer steps taken before the rewind checkpoint is captured.
    pub rewind_step: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            eval_batch_size: 128,
            max_epochs: 10,
            patience: 3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.1,
            seed: 0,
            metric: SelectionMetric::Auto,
            rewind_step: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon >= 0.0 && self.weight_decay >= 0.0) {
            return bad("epsilon and weight_decay must be non-negative");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "step", "loss", "dev_metric"])?;
        for r in &self.rows {
            w.write_record([r.epoch.to_string(), r.step.to_string(), r.loss.to_string(), r.dev_metric.to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8 csv"))
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub best: Checkpoint,
    pub rewind: Checkpoint,
    pub log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub best: Checkpoint,
    pub log: TrainLog,
    pub warnings: Vec<String>,
}

/// Dev metric of `params` under `masks` on the given examples.
pub fn dev_metric(
    params: &EncoderParams,
    masks: &MaskSet,
    examples: &[&Example],
    metric: SelectionMetric,
    batch_size: usize,
) -> Result<f64> {
    let pred = predict(params, masks, examples, batch_size)?;
    let gold: Vec<&Label> = examples.iter().map(|e| &e.label).collect();
    let use_f1 = match metric {
        SelectionMetric::Auto => params.config.task == TaskKind::TokenTagging,
        SelectionMetric::Accuracy => false,
        SelectionMetric::MacroF1 => true,
    };
    if use_f1 {
        macro_f1(&gold, &pred)
    } else {
        accuracy(&gold, &pred)
    }
}

type Observer<'a> = Box<dyn FnMut(u64, &EncoderParams) + 'a>;

/// Runs training loops over one corpus. An optional observer sees the
/// parameters before every optimizer step.
pub struct Trainer<'a> {
    corpus: &'a DomainCorpus,
    config: TrainConfig,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a DomainCorpus, config: TrainConfig) -> Self {
        Trainer { corpus, config, observer: None }
    }

    pub fn observe(mut self, f: impl FnMut(u64, &EncoderParams) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    /// Trains all parameters with every element active.
    pub fn finetune(&mut self, params: EncoderParams, masks: &MaskSet) -> Result<FinetuneOutcome> {
        if !masks.all_active() {
            return Err(Error::Contract("finetuning expects every mask at 1.0".into()));
        }
        let (best, rewind, log) = self.run(params, masks, Some(self.config.rewind_step))?;
        let rewind = rewind.ok_or_else(|| {
            Error::Config(format!("rewind_step {} is beyond the end of finetuning", self.config.rewind_step))
        })?;
        Ok(FinetuneOutcome { best, rewind, log })
    }

    /// Restores every parameter from `rewind`, then retrains with `pruned`
    /// fixed. Pruned elements are removed from the graph, so their
    /// parameters get no gradient, decay or moment updates. The optimizer
    /// starts fresh.
    pub fn rewind_and_retrain(&mut self, rewind: &Checkpoint, pruned: &MaskSet) -> Result<RetrainOutcome> {
        let cfg = &rewind.params.config;
        if !pruned.matches(cfg) {
            return Err(Error::Contract("mask set does not match the checkpoint's model".into()));
        }
        if !pruned.is_binary() {
            return Err(Error::Contract("retraining needs binary masks".into()));
        }
        let mut masks = pruned.clone();
        masks.set_tracked(false);
        let mut warnings = Vec::new();
        for layer in 0..cfg.layers {
            let ids = (0..cfg.heads).map(|h| ElementId::head(layer, h)).chain([ElementId::ffn(layer)]);
            if ids.into_iter().all(|id| masks.is_pruned(id)) {
                let w = format!("every head and the FFN block of layer {layer} are pruned");
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        let (best, _, log) = self.run(rewind.params.clone(), &masks, None)?;
        Ok(RetrainOutcome { best, log, warnings })
    }

    fn run(
        &mut self,
        mut params: EncoderParams,
        masks: &MaskSet,
        rewind_step: Option<u64>,
    ) -> Result<(Checkpoint, Option<Checkpoint>, TrainLog)> {
        let cfg = self.config.clone();
        cfg.validate()?;
        let train = self.corpus.train_examples();
        let dev = self.corpus.dev_examples();
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Validation("training needs non-empty train and dev sets".into()));
        }
        let opt = cfg.optimizer();
        let mut state = AdamState::new(&params);
        let snapshot = |params: &EncoderParams, step, state: Option<&AdamState>, dev_metric| Checkpoint {
            step,
            params: params.clone(),
            masks: masks.clone(),
            optimizer: state.cloned(),
            dev_metric,
        };
        let mut rewind = (rewind_step == Some(0)).then(|| snapshot(&params, 0, None, None));
        let mut best: Option<Checkpoint> = None;
        let mut log = TrainLog::default();
        let mut step = 0u64;
        let mut stale = 0usize;
        let fwd = |seed| ForwardOptions { track_params: true, remove_pruned: true, dropout: cfg.dropout, dropout_seed: seed };

        for epoch in 0..cfg.max_epochs {
            let order = Order::Shuffled { seed: cfg.seed, epoch: epoch as u64 };
            let mut loss_sum = 0.0;
            let epoch_batches = batches(&train, cfg.batch_size, order, Grouping::Mixed)?;
            for batch in &epoch_batches {
                if let Some(f) = self.observer.as_mut() {
                    f(step, &params);
                }
                let mut pass = forward_pass(&params, masks, &batch.tokens, fwd(derive_seed(cfg.seed ^ 0xD50, step)))?;
                let loss = pass.loss(&batch.targets)?;
                let value = pass.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, step {step}")));
                }
                loss_sum += value;
                let grads = pass.tape.backward(loss)?;
                let slot_grads: Vec<_> = pass.param_vars.iter().map(|v| v.and_then(|v| grads.get(v))).collect();
                opt.step(&mut state, &mut params, &slot_grads)?;
                step += 1;
                if rewind_step == Some(step) {
                    rewind = Some(snapshot(&params, step, Some(&state), None));
                }
            }
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters diverged in epoch {epoch}")));
            }
            let metric = dev_metric(&params, masks, &dev, cfg.metric, cfg.eval_batch_size)?;
            log.rows.push(LogRow { epoch, step, loss: loss_sum / epoch_batches.len() as f64, dev_metric: metric });
            if best.as_ref().and_then(|b| b.dev_metric).is_none_or(|b| metric > b) {
                best = Some(snapshot(&params, step, Some(&state), Some(metric)));
                stale = 0;
            } else {
                stale += 1;
                if stale > cfg.patience {
                    break;
                }
            }
        }
        Ok((best.expect("at least one epoch ran"), rewind, log))
    }
}

/// Finetunes with default observer settings.
pub fn finetune(
    params: EncoderParams,
    masks: &MaskSet,
    corpus: &DomainCorpus,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    Trainer::new(corpus, config.clone()).finetune(params, masks)
}

pub fn rewind_and_retrain(
    rewind: &Checkpoint,
    pruned: &MaskSet,
    corpus: &DomainCorpus,
    config: &TrainConfig,
) -> Result<RetrainOutcome> {
    Trainer::new(corpus, config.clone()).rewind_and_retrain(rewind, pruned)
}
