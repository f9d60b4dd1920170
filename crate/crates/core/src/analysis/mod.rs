//! Out-of-domain evaluation, the activation probe and multi-seed sweeps.

mod probe;
mod sweep;

pub use probe::{classify_neuron_generality, probe_activations, ActivationStats, Generality, NeuronGenerality, ProbeConfig};
pub use sweep::{
    prepare_seed, strategy_label, sweep_lambda, sweep_sparsity, sweep_with_artifacts, CurvePoint, LambdaPoint,
    LambdaReport, LambdaSeries, PairedDelta, SeedArtifacts, Stat, StrategyCurve, SweepPlan, SweepReport, SweepRow,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunSeeds;
use crate::data::{DomainCorpus, Label};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_f1, predict};
use crate::model::{EncoderParams, MaskSet, ModelConfig, TaskKind};
use crate::numeric::exact_mean;
use crate::pruning::{select, SelectOptions, SparsitySchedule, Strategy, TicketSelection};
use crate::scoring::{expressive_scores, ExpressiveScoreTable, ScoringConfig};
use crate::train::{Checkpoint, FinetuneOutcome, RetrainOutcome, TrainConfig, Trainer};

/// Everything a finetune, score, prune, rewind, retrain, evaluate run needs
/// besides the corpus and the seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub select: SelectOptions,
    pub eval_batch_size: usize,
    /// Domains to score; all training domains when absent.
    pub score_domains: Option<Vec<String>>,
}

impl Pipeline {
    /// The model config with vocabulary, class count and task taken from
    /// the corpus.
    pub fn model_for(&self, corpus: &DomainCorpus) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = corpus.vocab_size;
        m.num_classes = corpus.num_classes;
        m.task = corpus.task;
        if corpus.max_len() > m.max_len {
            return Err(Error::Config(format!(
                "corpus sequences reach length {} but model.max_len is {}",
                corpus.max_len(),
                m.max_len
            )));
        }
        m.validate()?;
        Ok(m)
    }

    fn train_config(&self, seeds: RunSeeds) -> TrainConfig {
        TrainConfig { seed: seeds.train, ..self.train.clone() }
    }

    pub fn finetune(&self, corpus: &DomainCorpus, seeds: RunSeeds) -> Result<FinetuneOutcome> {
        let model = ModelConfig { seed: seeds.model, ..self.model_for(corpus)? };
        let params = EncoderParams::init(&model, seeds.model)?;
        Trainer::new(corpus, self.train_config(seeds)).finetune(params, &MaskSet::ones(&model))
    }

    pub fn score_domains(&self, corpus: &DomainCorpus) -> Vec<String> {
        self.score_domains.clone().unwrap_or_else(|| corpus.train_domain_names())
    }

    pub fn score(&self, finetuned: &Checkpoint, corpus: &DomainCorpus) -> Result<ExpressiveScoreTable> {
        expressive_scores(finetuned, corpus, &self.score_domains(corpus), &self.scoring)
    }

    pub fn select(
        &self,
        strategy: Strategy,
        scores: &ExpressiveScoreTable,
        model: &ModelConfig,
        schedule: &SparsitySchedule,
    ) -> Result<TicketSelection> {
        select(strategy, Some(scores), self.scoring.normalization, model, schedule, self.select)
    }

    pub fn retrain(
        &self,
        corpus: &DomainCorpus,
        rewind: &Checkpoint,
        masks: &MaskSet,
        seeds: RunSeeds,
    ) -> Result<RetrainOutcome> {
        Trainer::new(corpus, self.train_config(seeds)).rewind_and_retrain(rewind, masks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub examples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Per-domain metrics with their unweighted averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub per_domain: BTreeMap<String, DomainMetrics>,
    pub average_accuracy: f64,
    pub average_macro_f1: f64,
}

impl EvalReport {
    pub fn from_domains(task: TaskKind, per_domain: BTreeMap<String, DomainMetrics>) -> Result<Self> {
        if per_domain.is_empty() {
            return Err(Error::Contract("evaluation needs at least one domain".into()));
        }
        let acc: Vec<f64> = per_domain.values().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = per_domain.values().map(|m| m.macro_f1).collect();
        Ok(EvalReport { task, average_accuracy: exact_mean(&acc), average_macro_f1: exact_mean(&f1), per_domain })
    }

    /// Accuracy for sequence tasks, macro-F1 for tagging.
    pub fn primary(&self) -> f64 {
        match self.task {
            TaskKind::SequenceClassification => self.average_accuracy,
            TaskKind::TokenTagging => self.average_macro_f1,
        }
    }

    pub fn primary_of(&self, m: &DomainMetrics) -> f64 {
        match self.task {
            TaskKind::SequenceClassification => m.accuracy,
            TaskKind::TokenTagging => m.macro_f1,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::SequenceClassification => "accuracy",
        TaskKind::TokenTagging => "macro-f1",
    }
}

/// Accuracy and macro-F1 of the checkpoint (under its masks) on each
/// domain, averaged with equal domain weights.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &DomainCorpus, domains: &[String], batch_size: usize) -> Result<EvalReport> {
    if domains.is_empty() {
        return Err(Error::Contract("evaluation needs at least one domain".into()));
    }
    let mut per_domain = BTreeMap::new();
    for d in domains {
        let examples = corpus.domain_examples(d)?;
        if examples.is_empty() {
            return Err(Error::Validation(format!("domain {d:?} has no examples to evaluate")));
        }
        let pred = predict(&checkpoint.params, &checkpoint.masks, &examples, batch_size)?;
        let gold: Vec<&Label> = examples.iter().map(|e| &e.label).collect();
        let m = DomainMetrics { examples: examples.len(), accuracy: accuracy(&gold, &pred)?, macro_f1: macro_f1(&gold, &pred)? };
        per_domain.insert(d.clone(), m);
    }
    EvalReport::from_domains(checkpoint.params.config.task, per_domain)
}
