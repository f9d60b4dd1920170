//! Ticket selection: greedy pruning of lowest-scoring heads and FFN blocks
//! across a sparsity schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ElementId, MaskSet, ModelConfig};
use crate::scoring::{aggregate, domain_general_scores, DomainGeneralScoreTable, ExpressiveScoreTable, HeadNormalization};

/// Levels are compared with this tolerance when looked up.
const LEVEL_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SparsitySchedule {
    levels: Vec<f64>,
}

impl SparsitySchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("sparsity schedule is empty".into()));
        }
        if levels.iter().any(|l| !(0.0..1.0).contains(l)) {
            return Err(Error::Config("sparsity levels must lie in [0, 1)".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sparsity levels must be strictly increasing".into()));
        }
        Ok(SparsitySchedule { levels })
    }

    /// `count` levels evenly spaced from `first` to `last` inclusive.
    pub fn linspace(first: f64, last: f64, count: usize) -> Result<Self> {
        let levels = match count {
            0 => Vec::new(),
            1 => vec![first],
            _ => (0..count).map(|i| first + (last - first) * i as f64 / (count - 1) as f64).collect(),
        };
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

impl Default for SparsitySchedule {
    /// 25 levels from 2% to 50%.
    fn default() -> Self {
        Self::linspace(0.02, 0.50, 25).expect("valid default schedule")
    }
}

impl TryFrom<Vec<f64>> for SparsitySchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SparsitySchedule> for Vec<f64> {
    fn from(s: SparsitySchedule) -> Self {
        s.levels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    Doge { lambda: f64 },
    Winning,
    Random { seed: u64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Doge { .. } => "doge",
            Strategy::Winning => "winning",
            Strategy::Random { .. } => "random",
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Strategy::Doge { lambda } => Some(*lambda),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityMode {
    /// Fraction of prunable parameters removed.
    #[default]
    Parameters,
    /// Fraction of prunable elements removed.
    Elements,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruningPool {
    /// Heads and FFN blocks share one ranking.
    #[default]
    Global,
    /// Heads and FFN blocks each reach the level separately.
    PerKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectOptions {
    pub mode: SparsityMode,
    pub pool: PruningPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSelection {
    pub level: f64,
    /// Pruned elements in pruning order.
    pub pruned: Vec<ElementId>,
    pub achieved_sparsity: f64,
}

/// Pruned sets per level; nested because every level cuts one shared order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TicketSelection {
    pub strategy: Strategy,
    pub options: SelectOptions,
    /// Every element, lowest score first.
    pub order: Vec<ElementId>,
    pub levels: Vec<LevelSelection>,
}

impl TicketSelection {
    pub fn level(&self, level: f64) -> Result<&LevelSelection> {
        self.levels
            .iter()
            .find(|l| (l.level - level).abs() <= LEVEL_TOLERANCE)
            .ok_or_else(|| Error::Lookup(format!("sparsity level {level} is not in the selection")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sel: Self = serde_json::from_str(s)?;
        let mut sorted = sel.order.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != sel.order.len() {
            return Err(Error::Validation("selection order repeats an element".into()));
        }
        for l in &sel.levels {
            if l.pruned.iter().any(|id| !sel.order.contains(id)) {
                return Err(Error::Validation("selection prunes an element missing from its order".into()));
            }
        }
        Ok(sel)
    }
}

/// Ascending by score; ties go to the lower element identity.
pub fn pruning_order(scores: &BTreeMap<ElementId, f64>) -> Result<Vec<ElementId>> {
    if let Some((id, _)) = scores.iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::Validation(format!("score for {id} is NaN")));
    }
    let mut order: Vec<(ElementId, f64)> = scores.iter().map(|(k, v)| (*k, *v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(order.into_iter().map(|(k, _)| k).collect())
}

fn weight(id: ElementId, config: &ModelConfig, mode: SparsityMode) -> u64 {
    match mode {
        SparsityMode::Parameters => id.param_count(config) as u64,
        SparsityMode::Elements => 1,
    }
}

/// Length of the shortest prefix whose weight reaches `level` of the total.
/// A prefix covering every element is rejected.
fn greedy_prefix(weights: &[u64], level: f64) -> Result<usize> {
    let total = weights.iter().sum::<u64>() as f64;
    let mut removed = 0u64;
    for (k, w) in weights.iter().enumerate() {
        if removed as f64 / total >= level {
            return Ok(k);
        }
        removed += w;
    }
    Err(Error::Validation(format!("sparsity level {level} is reachable only by pruning every element")))
}

/// Applies the greedy cut for every level of `schedule` to a fixed order.
pub fn select_by_order(
    strategy: Strategy,
    order: Vec<ElementId>,
    config: &ModelConfig,
    schedule: &SparsitySchedule,
    options: SelectOptions,
) -> Result<TicketSelection> {
    let all = ElementId::all(config);
    let mut sorted = order.clone();
    sorted.sort();
    if sorted != all {
        return Err(Error::Validation("scores do not cover exactly the model's prunable elements".into()));
    }
    let pools: Vec<Vec<ElementId>> = match options.pool {
        PruningPool::Global => vec![order.clone()],
        PruningPool::PerKind => vec![
            order.iter().copied().filter(ElementId::is_head).collect(),
            order.iter().copied().filter(|id| !id.is_head()).collect(),
        ],
    };
    let total: u64 = all.iter().map(|id| weight(*id, config, options.mode)).sum();
    let mut levels = Vec::with_capacity(schedule.levels().len());
    for &level in schedule.levels() {
        let mut pruned: Vec<ElementId> = Vec::new();
        for pool in &pools {
            let weights: Vec<u64> = pool.iter().map(|id| weight(*id, config, options.mode)).collect();
            let k = greedy_prefix(&weights, level)?;
            pruned.extend_from_slice(&pool[..k]);
        }
        let rank: BTreeMap<ElementId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        pruned.sort_by_key(|id| rank[id]);
        let removed: u64 = pruned.iter().map(|id| weight(*id, config, options.mode)).sum();
        levels.push(LevelSelection { level, pruned, achieved_sparsity: removed as f64 / total as f64 });
    }
    Ok(TicketSelection { strategy, options, order, levels })
}

/// Doge tickets: lowest μ − λ·v pruned first.
pub fn select_doge(
    general: &DomainGeneralScoreTable,
    config: &ModelConfig,
    schedule: &SparsitySchedule,
    options: SelectOptions,
) -> Result<TicketSelection> {
    let order = pruning_order(&general.score_map())?;
    select_by_order(Strategy::Doge { lambda: general.lambda }, order, config, schedule, options)
}

/// Winning tickets: lowest mean expressive score pruned first.
pub fn select_winning(
    table: &ExpressiveScoreTable,
    config: &ModelConfig,
    schedule: &SparsitySchedule,
    options: SelectOptions,
) -> Result<TicketSelection> {
    let means = domain_general_scores(table, 0.0)?.mean_map();
    select_by_order(Strategy::Winning, pruning_order(&means)?, config, schedule, options)
}

/// Random tickets: a seeded uniform shuffle.
pub fn select_random(
    seed: u64,
    config: &ModelConfig,
    schedule: &SparsitySchedule,
    options: SelectOptions,
) -> Result<TicketSelection> {
    let mut order = ElementId::all(config);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    select_by_order(Strategy::Random { seed }, order, config, schedule, options)
}

/// Dispatches on `strategy`; doge and winning need a score table and rank
/// under the same head normalization.
pub fn select(
    strategy: Strategy,
    table: Option<&ExpressiveScoreTable>,
    normalization: HeadNormalization,
    config: &ModelConfig,
    schedule: &SparsitySchedule,
    options: SelectOptions,
) -> Result<TicketSelection> {
    let need = || table.ok_or_else(|| Error::Contract(format!("{} selection needs expressive scores", strategy.name())));
    match strategy {
        Strategy::Doge { lambda } => select_doge(&aggregate(need()?, lambda, normalization)?, config, schedule, options),
        Strategy::Winning => {
            let means = aggregate(need()?, 0.0, normalization)?.mean_map();
            select_by_order(Strategy::Winning, pruning_order(&means)?, config, schedule, options)
        }
        Strategy::Random { seed } => select_random(seed, config, schedule, options),
    }
}

/// Masks with the selection's pruned elements at 0.0, all others at 1.0.
pub fn apply(selection: &TicketSelection, level: f64, base: &MaskSet) -> Result<MaskSet> {
    let chosen = selection.level(level)?;
    let mut masks = base.clone();
    masks.set_tracked(false);
    for id in chosen.pruned.iter() {
        masks.prune(*id)?;
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { layers: 1, heads: 3, d_model: 6, d_head: 2, d_inner: 4, max_len: 4, vocab_size: 8, ..Default::default() }
    }

    #[test]
    fn default_schedule_has_25_levels() {
        let s = SparsitySchedule::default();
        assert_eq!(s.levels().len(), 25);
        assert_eq!(s.levels()[0], 0.02);
        assert!((s.levels()[24] - 0.5).abs() < 1e-15);
        assert!((s.levels()[1] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(SparsitySchedule::new(vec![0.1, 0.1]).is_err());
        assert!(SparsitySchedule::new(vec![0.5, 0.2]).is_err());
        assert!(SparsitySchedule::new(vec![1.0]).is_err());
        assert!(SparsitySchedule::new(vec![]).is_err());
        assert!(serde_json::from_str::<SparsitySchedule>("[0.3, 0.2]").is_err());
    }

    #[test]
    fn quarter_of_four_equal_elements_prunes_lowest() {
        let c = ModelConfig { layers: 1, heads: 3, d_model: 6, d_head: 2, ..cfg() };
        let ids = ElementId::all(&c);
        let scores: BTreeMap<ElementId, f64> = ids.iter().copied().zip([0.1, 0.5, 0.3, 0.2]).collect();
        let order = pruning_order(&scores).unwrap();
        let opts = SelectOptions { mode: SparsityMode::Elements, ..Default::default() };
        let sel = select_by_order(Strategy::Winning, order, &c, &SparsitySchedule::new(vec![0.0, 0.25]).unwrap(), opts)
            .unwrap();
        assert!(sel.levels[0].pruned.is_empty());
        assert_eq!(sel.levels[1].pruned, vec![ids[0]]);
        let m = apply(&sel, 0.25, &MaskSet::ones(&c)).unwrap();
        assert_eq!(m.pruned(), vec![ids[0]]);
        assert_eq!(apply(&sel, 0.0, &MaskSet::ones(&c)).unwrap(), MaskSet::ones(&c));
        assert!(matches!(apply(&sel, 0.3, &MaskSet::ones(&c)), Err(Error::Lookup(_))));
    }

    #[test]
    fn pruning_everything_is_rejected() {
        let c = cfg();
        let sched = SparsitySchedule::new(vec![0.99]).unwrap();
        let opts = SelectOptions { mode: SparsityMode::Elements, ..Default::default() };
        assert!(matches!(select_random(0, &c, &sched, opts), Err(Error::Validation(_))));
    }

    #[test]
    fn random_is_seeded() {
        let c = cfg();
        let s = SparsitySchedule::default();
        let a = select_random(5, &c, &s, SelectOptions::default()).unwrap();
        assert_eq!(a, select_random(5, &c, &s, SelectOptions::default()).unwrap());
    }

    #[test]
    fn per_kind_pool_prunes_both_kinds() {
        let c = ModelConfig { layers: 2, ..cfg() };
        let ids = ElementId::all(&c);
        // Heads score lowest, so a global pool would take heads first.
        let scores: BTreeMap<ElementId, f64> =
            ids.iter().map(|id| (*id, if id.is_head() { 0.1 } else { 1.0 })).collect();
        let sched = SparsitySchedule::new(vec![0.4]).unwrap();
        let opts = SelectOptions { mode: SparsityMode::Elements, pool: PruningPool::PerKind };
        let sel = select_by_order(Strategy::Winning, pruning_order(&scores).unwrap(), &c, &sched, opts).unwrap();
        assert!(sel.levels[0].pruned.iter().any(|id| !id.is_head()));
        assert!(sel.levels[0].pruned.iter().any(ElementId::is_head));
    }

    #[test]
    fn manifest_round_trip() {
        let c = cfg();
        let sel = select_random(1, &c, &SparsitySchedule::default(), SelectOptions::default()).unwrap();
        assert_eq!(TicketSelection::from_json(&sel.to_json().unwrap()).unwrap(), sel);
    }
}
