//! Per-domain expressive scores and their domain-general aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, DomainCorpus, Grouping, Order};
use crate::error::{Error, Result};
use crate::model::{per_example_mask_gradients, ElementId, MaskSet};
use crate::numeric::{exact_mean, fsum, median, population_variance};
use crate::plot;
use crate::train::Checkpoint;

/// Where per-layer ℓ2 normalization of head scores happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadNormalization {
    /// Normalize each domain's head scores, then aggregate.
    #[default]
    BeforeAggregation,
    /// Aggregate raw scores, then rescale heads by the layer norm of their means.
    AfterAggregation,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub batch_size: usize,
    pub normalization: HeadNormalization,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { batch_size: 64, normalization: HeadNormalization::BeforeAggregation }
    }
}

/// Expressive score per (domain, element).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressiveScoreTable {
    pub normalized: bool,
    pub domains: BTreeMap<String, BTreeMap<ElementId, f64>>,
}

impl ExpressiveScoreTable {
    /// Head scores divided by their per-layer ℓ2 norm in each domain.
    /// Layers whose head scores are all zero, and FFN scores, are unchanged.
    pub fn normalize_heads(&self) -> Self {
        let domains = self
            .domains
            .iter()
            .map(|(d, scores)| (d.clone(), normalize_layer_heads(scores).0))
            .collect();
        ExpressiveScoreTable { normalized: true, domains }
    }

    pub fn elements(&self) -> BTreeSet<ElementId> {
        self.domains.values().flat_map(|m| m.keys().copied()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Validation("score table has no domains".into()));
        }
        for (d, m) in &self.domains {
            if let Some((id, v)) = m.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Validation(format!("score {v} for {id} in domain {d:?} is not a non-negative number")));
            }
        }
        Ok(())
    }
}

/// Divides each layer's head scores by their ℓ2 norm; also returns the norms.
fn normalize_layer_heads(scores: &BTreeMap<ElementId, f64>) -> (BTreeMap<ElementId, f64>, BTreeMap<usize, f64>) {
    let mut norms: BTreeMap<usize, f64> = BTreeMap::new();
    let layers: BTreeSet<usize> = scores.keys().filter(|id| id.is_head()).map(|id| id.layer).collect();
    for layer in layers {
        let sq = fsum(scores.iter().filter(|(id, _)| id.is_head() && id.layer == layer).map(|(_, v)| v * v));
        norms.insert(layer, sq.sqrt());
    }
    let out = scores
        .iter()
        .map(|(id, v)| {
            let n = if id.is_head() { norms[&id.layer] } else { 0.0 };
            (*id, if n > 0.0 { v / n } else { *v })
        })
        .collect();
    (out, norms)
}

/// Mean over a domain's training examples of |per-example mask gradient|.
///
/// Absolute values are taken per example before averaging. Params are used
/// as-is; masks are all 1.0 and tracked during the pass.
pub fn expressive_scores(
    checkpoint: &Checkpoint,
    corpus: &DomainCorpus,
    domains: &[String],
    config: &ScoringConfig,
) -> Result<ExpressiveScoreTable> {
    if !checkpoint.masks.all_active() {
        return Err(Error::Contract("scoring expects a checkpoint with every mask at 1.0".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("scoring batch_size must be positive".into()));
    }
    if domains.is_empty() {
        return Err(Error::Validation("no domains requested for scoring".into()));
    }
    let params = &checkpoint.params;
    let masks = MaskSet::scoring(&params.config);
    let per_domain: Vec<(String, BTreeMap<ElementId, f64>)> = domains
        .par_iter()
        .map(|d| {
            let examples = corpus.domain_examples(d)?;
            if examples.is_empty() {
                return Err(Error::Validation(format!("domain {d:?} has no examples to score")));
            }
            let mut abs: BTreeMap<ElementId, Vec<f64>> = BTreeMap::new();
            for batch in batches(&examples, config.batch_size, Order::Sequential, Grouping::Mixed)? {
                let g = per_example_mask_gradients(params, &masks, &batch.tokens, &batch.targets)?;
                for (j, id) in g.elements.iter().enumerate() {
                    abs.entry(*id).or_default().extend(g.per_example.iter().map(|row| row[j].abs()));
                }
            }
            let scores = abs.into_iter().map(|(id, v)| (id, exact_mean(&v))).collect();
            Ok((d.clone(), scores))
        })
        .collect::<Result<_>>()?;
    for (d, s) in &per_domain {
        if s.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite expressive score in domain {d:?}")));
        }
    }
    let raw = ExpressiveScoreTable { normalized: false, domains: per_domain.into_iter().collect() };
    Ok(match config.normalization {
        HeadNormalization::BeforeAggregation => raw.normalize_heads(),
        _ => raw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralScore {
    pub mean: f64,
    pub variance: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainGeneralScoreTable {
    pub lambda: f64,
    pub scores: BTreeMap<ElementId, GeneralScore>,
}

impl DomainGeneralScoreTable {
    pub fn score_map(&self) -> BTreeMap<ElementId, f64> {
        self.scores.iter().map(|(id, s)| (*id, s.score)).collect()
    }

    pub fn mean_map(&self) -> BTreeMap<ElementId, f64> {
        self.scores.iter().map(|(id, s)| (*id, s.mean)).collect()
    }
}

/// μ, population variance v and μ − λ·v per element, domains weighted equally.
pub fn domain_general_scores(table: &ExpressiveScoreTable, lambda: f64) -> Result<DomainGeneralScoreTable> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if table.domains.is_empty() {
        return Err(Error::Validation("score table has no domains".into()));
    }
    let elements = table.elements();
    let mut scores = BTreeMap::new();
    for id in elements {
        let mut per_domain = Vec::with_capacity(table.domains.len());
        for (d, m) in &table.domains {
            match m.get(&id) {
                Some(v) => per_domain.push(*v),
                None => return Err(Error::Validation(format!("element {id} missing from domain {d:?}"))),
            }
        }
        let mean = exact_mean(&per_domain);
        let variance = population_variance(&per_domain);
        scores.insert(id, GeneralScore { mean, variance, score: mean - lambda * variance });
    }
    Ok(DomainGeneralScoreTable { lambda, scores })
}

/// Aggregation honoring a normalization mode. `AfterAggregation` expects a
/// raw table and rescales each layer's heads by the ℓ2 norm of their means
/// (variance by its square).
pub fn aggregate(table: &ExpressiveScoreTable, lambda: f64, mode: HeadNormalization) -> Result<DomainGeneralScoreTable> {
    match mode {
        HeadNormalization::BeforeAggregation if !table.normalized => {
            domain_general_scores(&table.normalize_heads(), lambda)
        }
        HeadNormalization::AfterAggregation => {
            if table.normalized {
                return Err(Error::Contract("after-aggregation normalization needs raw scores".into()));
            }
            let mut g = domain_general_scores(table, lambda)?;
            let (_, norms) = normalize_layer_heads(&g.mean_map());
            for (id, s) in g.scores.iter_mut() {
                let n = if id.is_head() { norms[&id.layer] } else { 0.0 };
                if n > 0.0 {
                    s.mean /= n;
                    s.variance /= n * n;
                    s.score = s.mean - lambda * s.variance;
                }
            }
            Ok(g)
        }
        _ => domain_general_scores(table, lambda),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    #[serde(rename = "HMHV")]
    HighMeanHighVariance,
    #[serde(rename = "HMLV")]
    HighMeanLowVariance,
    #[serde(rename = "LMHV")]
    LowMeanHighVariance,
    #[serde(rename = "LMLV")]
    LowMeanLowVariance,
}

impl Quadrant {
    pub fn code(&self) -> &'static str {
        match self {
            Quadrant::HighMeanHighVariance => "HMHV",
            Quadrant::HighMeanLowVariance => "HMLV",
            Quadrant::LowMeanHighVariance => "LMHV",
            Quadrant::LowMeanLowVariance => "LMLV",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantReport {
    pub mean_threshold: f64,
    pub variance_threshold: f64,
    pub classes: BTreeMap<ElementId, Quadrant>,
}

impl QuadrantReport {
    pub fn counts(&self) -> BTreeMap<Quadrant, usize> {
        let mut c = BTreeMap::new();
        for q in self.classes.values() {
            *c.entry(*q).or_insert(0) += 1;
        }
        c
    }
}

/// Classifies elements by mean and variance; values at or above a
/// threshold count as high. Thresholds default to the medians.
pub fn quadrants(
    table: &DomainGeneralScoreTable,
    mean_threshold: Option<f64>,
    variance_threshold: Option<f64>,
) -> Result<QuadrantReport> {
    let means: Vec<f64> = table.scores.values().map(|s| s.mean).collect();
    let vars: Vec<f64> = table.scores.values().map(|s| s.variance).collect();
    let mt = mean_threshold.unwrap_or_else(|| median(&means));
    let vt = variance_threshold.unwrap_or_else(|| median(&vars));
    if !(mt.is_finite() && vt.is_finite()) {
        return Err(Error::Config("quadrant thresholds must be finite".into()));
    }
    let classes = table
        .scores
        .iter()
        .map(|(id, s)| {
            let q = match (s.mean >= mt, s.variance >= vt) {
                (true, true) => Quadrant::HighMeanHighVariance,
                (true, false) => Quadrant::HighMeanLowVariance,
                (false, true) => Quadrant::LowMeanHighVariance,
                (false, false) => Quadrant::LowMeanLowVariance,
            };
            (*id, q)
        })
        .collect();
    Ok(QuadrantReport { mean_threshold: mt, variance_threshold: vt, classes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePie {
    pub element: ElementId,
    /// Mean score across domains.
    pub radius: f64,
    /// Each domain's share of the element's total score; all zero when the
    /// total is zero.
    pub slices: BTreeMap<String, f64>,
}

pub fn score_pies(table: &ExpressiveScoreTable) -> Result<Vec<ScorePie>> {
    let general = domain_general_scores(table, 0.0)?;
    Ok(general
        .scores
        .iter()
        .map(|(id, g)| {
            let values: Vec<(String, f64)> = table.domains.iter().map(|(d, m)| (d.clone(), m[id])).collect();
            let total = fsum(values.iter().map(|(_, v)| *v));
            let slices = values
                .into_iter()
                .map(|(d, v)| (d, if total > 0.0 { v / total } else { 0.0 }))
                .collect();
            ScorePie { element: *id, radius: g.mean, slices }
        })
        .collect())
}

/// Writes `<stem>.json` and `<stem>.svg` under `dir`; returns both paths.
pub fn export_score_pies(table: &ExpressiveScoreTable, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let pies = score_pies(table)?;
    std::fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&json, serde_json::to_string_pretty(&pies)?)?;
    let domains: Vec<String> = table.domains.keys().cloned().collect();
    let items: Vec<plot::Pie> = pies
        .iter()
        .map(|p| plot::Pie {
            label: p.element.to_string(),
            radius: p.radius,
            slices: domains.iter().map(|d| p.slices[d]).collect(),
        })
        .collect();
    std::fs::write(&svg, plot::pie_grid(&items, &domains, "Expressive scores by domain"))?;
    Ok((json, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[(ElementId, f64)])]) -> ExpressiveScoreTable {
        ExpressiveScoreTable {
            normalized: false,
            domains: rows.iter().map(|(d, s)| (d.to_string(), s.iter().copied().collect())).collect(),
        }
    }

    #[test]
    fn three_domain_example() {
        let e = ElementId::ffn(0);
        let t = table(&[("a", &[(e, 1.0)]), ("b", &[(e, 2.0)]), ("c", &[(e, 3.0)])]);
        let g = domain_general_scores(&t, 1.0).unwrap().scores[&e];
        assert_eq!(g.mean, 2.0);
        assert_eq!(g.variance, 2.0 / 3.0);
        assert_eq!(g.score, 2.0 - 2.0 / 3.0);
        assert!((g.score - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalizes_three_four_to_point_six_point_eight() {
        let (h0, h1, f) = (ElementId::head(0, 0), ElementId::head(0, 1), ElementId::ffn(0));
        let t = table(&[("a", &[(h0, 3.0), (h1, 4.0), (f, 7.0)])]).normalize_heads();
        let s = &t.domains["a"];
        assert_eq!((s[&h0], s[&h1], s[&f]), (0.6, 0.8, 7.0));
    }

    #[test]
    fn missing_element_is_a_consistency_error() {
        let (a, b) = (ElementId::ffn(0), ElementId::ffn(1));
        let t = table(&[("x", &[(a, 1.0), (b, 1.0)]), ("y", &[(a, 1.0)])]);
        assert!(matches!(domain_general_scores(&t, 1.0), Err(Error::Validation(_))));
        assert!(domain_general_scores(&t, -1.0).is_err());
    }

    #[test]
    fn quadrant_corners_and_ties() {
        let ids: Vec<ElementId> = (0..4).map(ElementId::ffn).collect();
        let corners = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        let g = DomainGeneralScoreTable {
            lambda: 0.0,
            scores: ids
                .iter()
                .zip(corners)
                .map(|(id, (m, v))| (*id, GeneralScore { mean: m, variance: v, score: m }))
                .collect(),
        };
        let q = quadrants(&g, None, None).unwrap();
        assert_eq!(q.counts().len(), 4);
        assert_eq!(q.classes[&ids[3]], Quadrant::HighMeanHighVariance);

        let same = DomainGeneralScoreTable {
            lambda: 0.0,
            scores: ids.iter().map(|id| (*id, GeneralScore { mean: 1.0, variance: 0.5, score: 1.0 })).collect(),
        };
        let q = quadrants(&same, None, None).unwrap();
        assert_eq!(q.counts(), BTreeMap::from([(Quadrant::HighMeanHighVariance, 4)]));
        assert!(quadrants(&same, Some(f64::NAN), None).is_err());
    }

    #[test]
    fn pie_slices() {
        let (a, b) = (ElementId::ffn(0), ElementId::ffn(1));
        let t = table(&[
            ("d0", &[(a, 1.0), (b, 2.0)]),
            ("d1", &[(a, 1.0), (b, 0.0)]),
            ("d2", &[(a, 1.0), (b, 0.0)]),
            ("d3", &[(a, 1.0), (b, 0.0)]),
        ]);
        let pies = score_pies(&t).unwrap();
        assert!(pies[0].slices.values().all(|s| *s == 0.25));
        assert_eq!(pies[1].slices["d0"], 1.0);
        assert_eq!(pies[1].radius, 0.5);
    }

    #[test]
    fn score_table_json_round_trip() {
        let t = table(&[("a", &[(ElementId::head(1, 2), 0.1 + 0.2), (ElementId::ffn(1), 1.0 / 3.0)])]);
        let back = ExpressiveScoreTable::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(t.to_json().unwrap().contains("\"1:head:2\""));
    }
}
