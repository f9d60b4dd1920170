//! Run configuration: one TOML document covering every stage, with all
//! seeds derived from a single top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{Pipeline, ProbeConfig};
use crate::data::{derive_seed, IngestOptions, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pruning::{PruningPool, SelectOptions, SparsityMode, SparsitySchedule, Strategy};
use crate::scoring::{HeadNormalization, ScoringConfig};
use crate::train::TrainConfig;

const DATA_STREAM: u64 = 0xDA7A;
const MODEL_STREAM: u64 = 0x30DE1;
const TRAIN_STREAM: u64 = 0x7EA1;
const RANDOM_STREAM: u64 = 0x5A4D;
const SWEEP_STREAM: u64 = 0x5EED_0000;

/// Derived seeds are kept below 2^63 so they survive TOML's signed integers.
fn derived(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream) >> 1
}

/// Seeds for one training run, all derived from `run`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub run: u64,
    pub model: u64,
    pub train: u64,
    pub random: u64,
}

impl RunSeeds {
    pub fn new(run: u64) -> Self {
        RunSeeds {
            run,
            model: derived(run, MODEL_STREAM),
            train: derived(run, TRAIN_STREAM),
            random: derived(run, RANDOM_STREAM),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Jsonl,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Corpus file for `jsonl` sources.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticTaskSpec,
    pub ingest: IngestOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    pub batch_size: usize,
    pub normalization: HeadNormalization,
    /// Variance coefficient for doge selection.
    pub lambda: f64,
    /// Domains to score; all training domains when absent.
    pub domains: Option<Vec<String>>,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let s = ScoringConfig::default();
        ScoringSection { batch_size: s.batch_size, normalization: s.normalization, lambda: 10.0, domains: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[default]
    Doge,
    Winning,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    pub strategy: StrategyKind,
    pub schedule: SparsitySchedule,
    pub mode: SparsityMode,
    pub pool: PruningPool,
    /// Level whose mask `rewind` and `evaluate` use by default.
    pub level: f64,
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            strategy: StrategyKind::Doge,
            schedule: SparsitySchedule::default(),
            mode: SparsityMode::Parameters,
            pool: PruningPool::Global,
            level: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Number of seeds per sweep.
    pub seeds: usize,
    pub strategies: Vec<Strategy>,
    pub lambda_grid: Vec<f64>,
    /// Levels for the λ sweep.
    pub lambda_levels: SparsitySchedule,
    pub eval_batch_size: usize,
    pub probe: ProbeConfig,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            seeds: 5,
            strategies: vec![
                Strategy::Winning,
                Strategy::Doge { lambda: 10.0 },
                Strategy::Doge { lambda: 50.0 },
                Strategy::Random { seed: 0 },
            ],
            lambda_grid: vec![0.0, 10.0, 50.0, 100.0],
            lambda_levels: SparsitySchedule::new(vec![0.1, 0.2, 0.3, 0.4, 0.5]).expect("valid levels"),
            eval_batch_size: 128,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    /// Parent of the run directory; overridden by `DOGE_OUTPUT_ROOT`.
    pub output_root: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub scoring: ScoringSection,
    pub pruning: PruningSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            output_root: None,
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringSection::default(),
            pruning: PruningSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words that are not TOML literals are taken as strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parses a document, applies `key=value` overrides, validates and
    /// resolves derived seeds.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_key(&mut table, k, v)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Seeds of the single-run pipeline.
    pub fn run_seeds(&self) -> RunSeeds {
        RunSeeds::new(self.seed)
    }

    /// Seed of the synthetic corpus.
    pub fn data_seed(&self) -> u64 {
        derived(self.seed, DATA_STREAM)
    }

    /// One run seed per sweep replicate.
    pub fn sweep_seeds(&self) -> Vec<u64> {
        (0..self.analysis.seeds as u64).map(|i| derived(self.seed, SWEEP_STREAM + i)).collect()
    }

    /// Strategy of the single-run `select` stage.
    pub fn strategy(&self) -> Strategy {
        match self.pruning.strategy {
            StrategyKind::Doge => Strategy::Doge { lambda: self.scoring.lambda },
            StrategyKind::Winning => Strategy::Winning,
            StrategyKind::Random => Strategy::Random { seed: self.run_seeds().random },
        }
    }

    pub fn scoring_config(&self) -> ScoringConfig {
        ScoringConfig { batch_size: self.scoring.batch_size, normalization: self.scoring.normalization }
    }

    pub fn select_options(&self) -> SelectOptions {
        SelectOptions { mode: self.pruning.mode, pool: self.pruning.pool }
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            model: self.model.clone(),
            train: self.train.clone(),
            scoring: self.scoring_config(),
            select: self.select_options(),
            eval_batch_size: self.analysis.eval_batch_size,
            score_domains: self.scoring.domains.clone(),
        }
    }

    /// Checks every section and fills derived seeds. Explicit sub-seeds
    /// are accepted only when they equal the derived value, so an echoed
    /// config loads back unchanged.
    pub fn resolve(mut self) -> Result<Self> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::Config(format!("run name {:?} must be a plain directory name", self.name)));
        }
        let seeds = self.run_seeds();
        let data_seed = self.data_seed();
        for (key, found, derived) in [
            ("data.synthetic.seed", &mut self.data.synthetic.seed, data_seed),
            ("model.seed", &mut self.model.seed, seeds.model),
            ("train.seed", &mut self.train.seed, seeds.train),
        ] {
            if *found != 0 && *found != derived {
                return Err(Error::Config(format!("{key} is derived from the top-level seed; set `seed` instead")));
            }
            *found = derived;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        } else if self.data.path.is_none() {
            return Err(Error::Config("data.path is required for jsonl sources".into()));
        }
        if self.scoring.batch_size == 0 {
            return Err(Error::Config("scoring.batch_size must be positive".into()));
        }
        if !(self.scoring.lambda.is_finite() && self.scoring.lambda >= 0.0) {
            return Err(Error::Config("scoring.lambda must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.pruning.level) {
            return Err(Error::Config("pruning.level must lie in [0, 1)".into()));
        }
        if self.analysis.seeds == 0 {
            return Err(Error::Config("analysis.seeds must be at least 1".into()));
        }
        if self.analysis.eval_batch_size == 0 {
            return Err(Error::Config("analysis.eval_batch_size must be positive".into()));
        }
        if self.analysis.strategies.is_empty() {
            return Err(Error::Config("analysis.strategies must not be empty".into()));
        }
        let lambdas = self.analysis.strategies.iter().filter_map(Strategy::lambda).chain(self.analysis.lambda_grid.iter().copied());
        for l in lambdas {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("lambda {l} must be finite and non-negative")));
            }
        }
        if self.analysis.lambda_grid.is_empty() {
            return Err(Error::Config("analysis.lambda_grid must not be empty".into()));
        }
        self.analysis.probe.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_round_trip() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.model.seed, cfg.run_seeds().model);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_rejections() {
        let set = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        let cfg = RunConfig::from_toml("[scoring]\nlambda = 1.0\n", &set("scoring.lambda", "50")).unwrap();
        assert_eq!(cfg.scoring.lambda, 50.0);
        let cfg = RunConfig::from_toml("", &set("pruning.strategy", "winning")).unwrap();
        assert_eq!(cfg.strategy(), Strategy::Winning);
        let cfg = RunConfig::from_toml("", &set("name", "exp1")).unwrap();
        assert_eq!(cfg.name, "exp1");
        for (doc, o) in [
            ("bogus = 1\n", vec![]),
            ("[model]\nheads = 3\n", vec![]),
            ("", set("train.nope", "1")),
            ("", set("model.seed", "7")),
            ("", set("name", "\"a/b\"")),
            ("", set("scoring.lambda", "-1")),
        ] {
            assert!(matches!(RunConfig::from_toml(doc, &o), Err(Error::Config(_))), "{doc} {o:?}");
        }
    }

    #[test]
    fn seeds_follow_the_top_level_seed() {
        let a = RunConfig::from_toml("seed = 1\n", &[]).unwrap();
        let b = RunConfig::from_toml("seed = 2\n", &[]).unwrap();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.data.synthetic.seed, b.data.synthetic.seed);
        assert_eq!(a.sweep_seeds().len(), 5);
        assert_ne!(a.sweep_seeds(), b.sweep_seeds());
    }
}
