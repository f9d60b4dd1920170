//! Multi-seed sparsity and λ sweeps.
//!
//! Each seed is finetuned and scored once. Every (strategy, level) cell
//! then reuses those scores for selection. Cells whose pruned sets
//! coincide for the same seed share one retraining run, which is exact
//! because retraining depends only on the rewind checkpoint, the mask and
//! the seed.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, metric_name, EvalReport, Pipeline};
use crate::config::RunSeeds;
use crate::data::{derive_seed, DomainCorpus};
use crate::error::{Error, Result};
use crate::model::{ElementId, MaskSet};
use crate::numeric::{exact_mean, fsum};
use crate::plot::{line_chart, Series};
use crate::pruning::{SparsitySchedule, Strategy};
use crate::scoring::ExpressiveScoreTable;
use crate::train::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub strategies: Vec<Strategy>,
    pub schedule: SparsitySchedule,
    pub seeds: Vec<u64>,
    /// Evaluation domains; every test domain when absent.
    pub eval_domains: Option<Vec<String>>,
}

/// Per-seed products shared by every cell of a sweep.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seeds: RunSeeds,
    pub finetuned: Checkpoint,
    pub rewind: Checkpoint,
    pub scores: ExpressiveScoreTable,
}

pub fn prepare_seed(pipeline: &Pipeline, corpus: &DomainCorpus, seed: u64) -> Result<SeedArtifacts> {
    let seeds = RunSeeds::new(seed);
    let run = || -> Result<SeedArtifacts> {
        let ft = pipeline.finetune(corpus, seeds)?;
        let scores = pipeline.score(&ft.best, corpus)?;
        Ok(SeedArtifacts { seeds, finetuned: ft.best, rewind: ft.rewind, scores })
    };
    run().map_err(|e| e.context(format!("seed {seed}")))
}

/// Display name used in reports: `winning`, `random`, `doge-<λ>`.
pub fn strategy_label(s: &Strategy) -> String {
    match s {
        Strategy::Doge { lambda } => format!("doge-{lambda}"),
        other => other.name().to_string(),
    }
}

/// A random strategy's seed is mixed with the run's random stream so each
/// replicate draws its own ordering.
fn concrete(s: Strategy, seeds: RunSeeds) -> Strategy {
    match s {
        Strategy::Random { seed } => Strategy::Random { seed: derive_seed(seeds.random, seed) },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub lambda: Option<f64>,
    pub level: f64,
    pub achieved_sparsity: f64,
    pub seed: u64,
    pub domain: String,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let mean = exact_mean(&values);
        let n = values.len();
        let std = if n > 1 {
            (fsum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, per_seed: values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: f64,
    pub achieved_sparsity: f64,
    pub metric: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyCurve {
    pub label: String,
    pub strategy: Strategy,
    pub points: Vec<CurvePoint>,
    /// Argmax of the mean curve; the lowest level wins ties.
    pub best_level: f64,
    pub best: Stat,
    /// Mean over seeds of each seed's own best level.
    pub mean_seed_best_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub strategy: String,
    pub baseline: String,
    /// The strategy's best level.
    pub level: f64,
    pub delta: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub eval_domains: Vec<String>,
    /// The finetuned, unpruned models.
    pub finetuned: Stat,
    pub curves: Vec<StrategyCurve>,
    pub deltas: Vec<PairedDelta>,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "lambda", "level", "achieved_sparsity", "seed", "domain", "accuracy", "macro_f1"])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.lambda.map(|l| l.to_string()).unwrap_or_default(),
            r.level.to_string(),
            r.achieved_sparsity.to_string(),
            r.seed.to_string(),
            r.domain.clone(),
            r.accuracy.to_string(),
            r.macro_f1.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8 csv"))
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    /// Everything except the per-row table.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn curve(&self, label: &str) -> Option<&StrategyCurve> {
        self.curves.iter().find(|c| c.label == label)
    }

    pub fn curves_svg(&self) -> String {
        let series: Vec<Series> = self
            .curves
            .iter()
            .map(|c| Series {
                name: c.label.clone(),
                points: c.points.iter().map(|p| (p.level, p.metric.mean)).collect(),
                spread: Some(c.points.iter().map(|p| p.metric.std).collect()),
            })
            .collect();
        line_chart(&series, "out-of-domain performance by sparsity", "sparsity", &self.metric)
    }
}

struct Cell {
    achieved: f64,
    report: EvalReport,
}

struct Grid {
    eval_domains: Vec<String>,
    finetuned: Vec<f64>,
    /// `cells[strategy][level][seed]`.
    cells: Vec<Vec<Vec<Cell>>>,
    rows: Vec<SweepRow>,
}

fn run_grid(
    pipeline: &Pipeline,
    corpus: &DomainCorpus,
    plan: &SweepPlan,
    artifacts: &[SeedArtifacts],
) -> Result<Grid> {
    if plan.strategies.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one strategy and one seed".into()));
    }
    let labels: BTreeSet<String> = plan.strategies.iter().map(strategy_label).collect();
    if labels.len() != plan.strategies.len() {
        return Err(Error::Config("sweep strategies must be distinct".into()));
    }
    if artifacts.len() != plan.seeds.len() || artifacts.iter().zip(&plan.seeds).any(|(a, s)| a.seeds.run != *s) {
        return Err(Error::Contract("seed artifacts do not match the sweep seeds".into()));
    }
    let eval_domains = plan.eval_domains.clone().unwrap_or_else(|| corpus.test_domain_names());
    let model = &artifacts[0].finetuned.params.config;

    let mut selections = Vec::new();
    for s in &plan.strategies {
        let mut per_seed = Vec::new();
        for a in artifacts {
            let sel = pipeline
                .select(concrete(*s, a.seeds), &a.scores, model, &plan.schedule)
                .map_err(|e| e.context(format!("{} seed {}", strategy_label(s), a.seeds.run)))?;
            per_seed.push(sel);
        }
        selections.push(per_seed);
    }

    let mut jobs: BTreeSet<(usize, Vec<ElementId>)> = BTreeSet::new();
    for per_seed in &selections {
        for (i, sel) in per_seed.iter().enumerate() {
            for l in &sel.levels {
                let mut key = l.pruned.clone();
                key.sort();
                jobs.insert((i, key));
            }
        }
    }
    let jobs: Vec<(usize, Vec<ElementId>)> = jobs.into_iter().collect();
    log::info!("sweep: {} retraining runs for {} cells", jobs.len(), plan.strategies.len() * plan.schedule.levels().len() * plan.seeds.len());
    let results: Vec<EvalReport> = jobs
        .par_iter()
        .map(|(i, pruned)| {
            let a = &artifacts[*i];
            let run = || -> Result<EvalReport> {
                let mut masks = MaskSet::ones(model);
                for id in pruned {
                    masks.prune(*id)?;
                }
                let out = pipeline.retrain(corpus, &a.rewind, &masks, a.seeds)?;
                evaluate(&out.best, corpus, &eval_domains, pipeline.eval_batch_size)
            };
            run().map_err(|e| e.context(format!("seed {} with {} elements pruned", a.seeds.run, pruned.len())))
        })
        .collect::<Result<_>>()?;
    let by_job: BTreeMap<&(usize, Vec<ElementId>), &EvalReport> = jobs.iter().zip(&results).collect();

    let finetuned = artifacts
        .par_iter()
        .map(|a| evaluate(&a.finetuned, corpus, &eval_domains, pipeline.eval_batch_size).map(|r| r.primary()))
        .collect::<Result<Vec<f64>>>()?;

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for (s, per_seed) in plan.strategies.iter().zip(&selections) {
        let mut per_level = Vec::new();
        for (k, level) in plan.schedule.levels().iter().enumerate() {
            let mut per_seed_cells = Vec::new();
            for (i, sel) in per_seed.iter().enumerate() {
                let l = &sel.levels[k];
                let mut key = l.pruned.clone();
                key.sort();
                let report = by_job[&(i, key)].clone();
                for (d, m) in &report.per_domain {
                    rows.push(SweepRow {
                        strategy: strategy_label(s),
                        lambda: s.lambda(),
                        level: *level,
                        achieved_sparsity: l.achieved_sparsity,
                        seed: plan.seeds[i],
                        domain: d.clone(),
                        accuracy: m.accuracy,
                        macro_f1: m.macro_f1,
                    });
                }
                per_seed_cells.push(Cell { achieved: l.achieved_sparsity, report });
            }
            per_level.push(per_seed_cells);
        }
        cells.push(per_level);
    }
    Ok(Grid { eval_domains, finetuned, cells, rows })
}

/// Index of the largest value; the first wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn curve(strategy: Strategy, schedule: &SparsitySchedule, cells: &[Vec<Cell>]) -> StrategyCurve {
    let levels = schedule.levels();
    let points: Vec<CurvePoint> = levels
        .iter()
        .zip(cells)
        .map(|(level, per_seed)| CurvePoint {
            level: *level,
            achieved_sparsity: exact_mean(&per_seed.iter().map(|c| c.achieved).collect::<Vec<_>>()),
            metric: Stat::of(per_seed.iter().map(|c| c.report.primary()).collect()),
        })
        .collect();
    let b = argmax(&points.iter().map(|p| p.metric.mean).collect::<Vec<_>>());
    let seeds = points[0].metric.per_seed.len();
    let seed_best: Vec<f64> = (0..seeds)
        .map(|i| levels[argmax(&points.iter().map(|p| p.metric.per_seed[i]).collect::<Vec<_>>())])
        .collect();
    StrategyCurve {
        label: strategy_label(&strategy),
        strategy,
        best_level: levels[b],
        best: points[b].metric.clone(),
        mean_seed_best_level: exact_mean(&seed_best),
        points,
    }
}

/// Full finetune, score, prune, rewind, retrain and evaluate runs for
/// every strategy, level and seed.
pub fn sweep_sparsity(pipeline: &Pipeline, corpus: &DomainCorpus, plan: &SweepPlan) -> Result<SweepReport> {
    let artifacts = plan
        .seeds
        .par_iter()
        .map(|s| prepare_seed(pipeline, corpus, *s))
        .collect::<Result<Vec<_>>>()?;
    sweep_with_artifacts(pipeline, corpus, plan, &artifacts)
}

/// As [`sweep_sparsity`] with finetuned checkpoints and scores supplied.
pub fn sweep_with_artifacts(
    pipeline: &Pipeline,
    corpus: &DomainCorpus,
    plan: &SweepPlan,
    artifacts: &[SeedArtifacts],
) -> Result<SweepReport> {
    let grid = run_grid(pipeline, corpus, plan, artifacts)?;
    let curves: Vec<StrategyCurve> =
        plan.strategies.iter().zip(&grid.cells).map(|(s, cells)| curve(*s, &plan.schedule, cells)).collect();
    let mut deltas = Vec::new();
    if let Some(w) = plan.strategies.iter().position(|s| *s == Strategy::Winning) {
        for (k, s) in plan.strategies.iter().enumerate() {
            if !matches!(s, Strategy::Doge { .. }) {
                continue;
            }
            let li = argmax(&curves[k].points.iter().map(|p| p.metric.mean).collect::<Vec<_>>());
            let d: Vec<f64> = grid.cells[k][li]
                .iter()
                .zip(&grid.cells[w][li])
                .map(|(a, b)| a.report.primary() - b.report.primary())
                .collect();
            deltas.push(PairedDelta {
                strategy: curves[k].label.clone(),
                baseline: curves[w].label.clone(),
                level: plan.schedule.levels()[li],
                delta: Stat::of(d),
            });
        }
    }
    let task = artifacts[0].finetuned.params.config.task;
    Ok(SweepReport {
        metric: metric_name(task).into(),
        seeds: plan.seeds.clone(),
        eval_domains: grid.eval_domains,
        finetuned: Stat::of(grid.finetuned),
        curves,
        deltas,
        rows: grid.rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub metric: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSeries {
    pub level: f64,
    /// Sorted by λ.
    pub points: Vec<LambdaPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub series: Vec<LambdaSeries>,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

impl LambdaReport {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn svg(&self) -> String {
        let series: Vec<Series> = self
            .series
            .iter()
            .map(|s| Series {
                name: format!("sparsity {}", s.level),
                points: s.points.iter().map(|p| (p.lambda, p.metric.mean)).collect(),
                spread: Some(s.points.iter().map(|p| p.metric.std).collect()),
            })
            .collect();
        line_chart(&series, "out-of-domain performance by variance coefficient", "lambda", &self.metric)
    }
}

/// Doge tickets for each λ in `grid` at each level, over seeds. Scores are
/// computed once per seed and shared across λ.
pub fn sweep_lambda(
    pipeline: &Pipeline,
    corpus: &DomainCorpus,
    grid: &[f64],
    levels: &SparsitySchedule,
    seeds: &[u64],
) -> Result<LambdaReport> {
    if grid.is_empty() {
        return Err(Error::Config("λ grid must not be empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Config(format!("lambda {l} must be finite and non-negative")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let plan = SweepPlan {
        strategies: sorted.iter().map(|l| Strategy::Doge { lambda: *l }).collect(),
        schedule: levels.clone(),
        seeds: seeds.to_vec(),
        eval_domains: None,
    };
    let report = sweep_sparsity(pipeline, corpus, &plan)?;
    let series = levels
        .levels()
        .iter()
        .enumerate()
        .map(|(k, level)| LambdaSeries {
            level: *level,
            points: sorted
                .iter()
                .zip(&report.curves)
                .map(|(l, c)| LambdaPoint { lambda: *l, metric: c.points[k].metric.clone() })
                .collect(),
        })
        .collect();
    Ok(LambdaReport { metric: report.metric, seeds: report.seeds, series, rows: report.rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[0.2]), 0);
    }

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(vec![1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(vec![4.0]).std, 0.0);
    }

    #[test]
    fn labels() {
        assert_eq!(strategy_label(&Strategy::Doge { lambda: 10.0 }), "doge-10");
        assert_eq!(strategy_label(&Strategy::Doge { lambda: 0.5 }), "doge-0.5");
        assert_eq!(strategy_label(&Strategy::Random { seed: 3 }), "random");
    }
}
