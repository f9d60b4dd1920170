//! Counts of FFN neurons whose pre-activation exceeds a threshold at one
//! token position, per domain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batches, DomainCorpus, Grouping, Order};
use crate::error::{Error, Result};
use crate::model::{forward_pass, ForwardOptions};
use crate::plot::heatmap;
use crate::train::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// A neuron counts as active when its pre-GELU value exceeds this.
    pub threshold: f64,
    pub position: usize,
    /// Neuron indices to probe; all of them when absent.
    pub neurons: Option<Vec<usize>>,
    /// Leading examples taken from each domain; all when absent.
    pub sample_size: Option<usize>,
    pub batch_size: usize,
    /// Rate gap above which a neuron is domain-specific.
    pub specificity_threshold: f64,
    /// Domains to probe; every train and test domain when absent.
    pub domains: Option<Vec<String>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            threshold: -2.0,
            position: 0,
            neurons: None,
            sample_size: Some(256),
            batch_size: 64,
            specificity_threshold: 0.5,
            domains: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || !self.specificity_threshold.is_finite() {
            return Err(Error::Config("probe thresholds must be finite".into()));
        }
        if self.batch_size == 0 || self.sample_size == Some(0) {
            return Err(Error::Config("probe batch_size and sample_size must be positive".into()));
        }
        Ok(())
    }

    pub fn domains_for(&self, corpus: &DomainCorpus) -> Vec<String> {
        self.domains.clone().unwrap_or_else(|| {
            let mut d = corpus.train_domain_names();
            d.extend(corpus.test_domain_names());
            d
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationStats {
    pub threshold: f64,
    pub position: usize,
    pub neurons: Vec<usize>,
    /// Examples probed per domain.
    pub totals: BTreeMap<String, usize>,
    /// `counts[domain][layer][k]` is the number of examples for which
    /// neuron `neurons[k]` was active.
    pub counts: BTreeMap<String, Vec<Vec<usize>>>,
}

impl ActivationStats {
    pub fn layers(&self) -> usize {
        self.counts.values().next().map_or(0, Vec::len)
    }

    /// Activation rate of probed neuron `k` in `layer`, one entry per domain.
    pub fn rates(&self, layer: usize, k: usize) -> Vec<f64> {
        self.counts.iter().map(|(d, c)| c[layer][k] as f64 / self.totals[d] as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.counts.keys().ne(self.totals.keys()) {
            return bad("activation counts and totals cover different domains".into());
        }
        let layers = self.layers();
        for (d, per_layer) in &self.counts {
            let total = self.totals[d];
            if total == 0 {
                return bad(format!("domain {d:?} has no probed examples"));
            }
            if per_layer.len() != layers {
                return bad(format!("domain {d:?} has {} layers, expected {layers}", per_layer.len()));
            }
            for row in per_layer {
                if row.len() != self.neurons.len() {
                    return bad(format!("domain {d:?} has {} neurons, expected {}", row.len(), self.neurons.len()));
                }
                if row.iter().any(|c| *c > total) {
                    return bad(format!("domain {d:?} has a count above its {total} examples"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stats: ActivationStats = serde_json::from_str(s)?;
        stats.validate()?;
        Ok(stats)
    }

    /// Neurons by domains, one block of rows per FFN layer.
    pub fn heatmap_svg(&self) -> String {
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for layer in 0..self.layers() {
            for (d, c) in &self.counts {
                rows.push(format!("L{layer} {d}"));
                values.push(c[layer].iter().map(|n| *n as f64 / self.totals[d] as f64).collect());
            }
        }
        let cols: Vec<String> = self.neurons.iter().map(usize::to_string).collect();
        heatmap(&values, &rows, &cols, &format!("activation rate (pre-activation > {})", self.threshold))
    }
}

/// Runs the checkpoint over each domain's sample and counts, per FFN
/// neuron, the examples whose pre-activation at `position` exceeds the
/// threshold. Examples shorter than `position + 1` are skipped.
pub fn probe_activations(
    checkpoint: &Checkpoint,
    corpus: &DomainCorpus,
    domains: &[String],
    config: &ProbeConfig,
) -> Result<ActivationStats> {
    config.validate()?;
    let model = &checkpoint.params.config;
    let neurons = config.neurons.clone().unwrap_or_else(|| (0..model.d_inner).collect());
    if let Some(n) = neurons.iter().find(|n| **n >= model.d_inner) {
        return Err(Error::Validation(format!("neuron {n} is outside the {} FFN units", model.d_inner)));
    }
    if domains.is_empty() {
        return Err(Error::Validation("no domains to probe".into()));
    }
    let mut masks = checkpoint.masks.clone();
    masks.set_tracked(false);
    let mut totals = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for d in domains {
        let mut examples = corpus.domain_examples(d)?;
        if let Some(n) = config.sample_size {
            examples.truncate(n);
        }
        examples.retain(|e| e.tokens.len() > config.position);
        if examples.is_empty() {
            return Err(Error::Validation(format!("domain {d:?} has no examples long enough to probe")));
        }
        let mut c = vec![vec![0usize; neurons.len()]; model.layers];
        for batch in batches(&examples, config.batch_size, Order::Sequential, Grouping::Mixed)? {
            let pass = forward_pass(&checkpoint.params, &masks, &batch.tokens, ForwardOptions::default())?;
            let seq = pass.seq_len();
            for (layer, pre) in pass.ffn_pre_activations.iter().enumerate() {
                let Some(pre) = pre else { continue };
                let values = pass.tape.value(*pre).data();
                for b in 0..batch.tokens.batch_size() {
                    let row = &values[(b * seq + config.position) * model.d_inner..][..model.d_inner];
                    for (k, n) in neurons.iter().enumerate() {
                        if row[*n] > config.threshold {
                            c[layer][k] += 1;
                        }
                    }
                }
            }
        }
        totals.insert(d.clone(), examples.len());
        counts.insert(d.clone(), c);
    }
    Ok(ActivationStats { threshold: config.threshold, position: config.position, neurons, totals, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generality {
    DomainSpecific,
    DomainGeneral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronGenerality {
    pub layer: usize,
    pub neuron: usize,
    /// Largest minus smallest per-domain activation rate.
    pub gap: f64,
    pub tag: Generality,
}

/// Tags a neuron domain-specific when its activation rates across domains
/// differ by more than `threshold`.
pub fn classify_neuron_generality(stats: &ActivationStats, threshold: f64) -> Result<Vec<NeuronGenerality>> {
    if stats.counts.len() < 2 {
        return Err(Error::Contract("neuron generality needs at least two domains".into()));
    }
    let mut out = Vec::new();
    for layer in 0..stats.layers() {
        for (k, neuron) in stats.neurons.iter().enumerate() {
            let rates = stats.rates(layer, k);
            let hi = rates.iter().copied().fold(f64::MIN, f64::max);
            let lo = rates.iter().copied().fold(f64::MAX, f64::min);
            let gap = hi - lo;
            let tag = if gap > threshold { Generality::DomainSpecific } else { Generality::DomainGeneral };
            out.push(NeuronGenerality { layer, neuron: *neuron, gap, tag });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(rates: &[f64]) -> ActivationStats {
        let names: Vec<String> = (0..rates.len()).map(|i| format!("d{i}")).collect();
        ActivationStats {
            threshold: -2.0,
            position: 0,
            neurons: vec![0],
            totals: names.iter().map(|n| (n.clone(), 10)).collect(),
            counts: names.iter().zip(rates).map(|(n, r)| (n.clone(), vec![vec![(r * 10.0) as usize]])).collect(),
        }
    }

    #[test]
    fn classification_examples() {
        let tag = |r: &[f64]| classify_neuron_generality(&stats(r), 0.5).unwrap()[0].tag;
        assert_eq!(tag(&[1.0, 0.0, 0.0]), Generality::DomainSpecific);
        assert_eq!(tag(&[0.8, 0.8, 0.8]), Generality::DomainGeneral);
        assert_eq!(tag(&[0.6, 0.4]), Generality::DomainGeneral);
        assert!(classify_neuron_generality(&stats(&[0.5]), 0.5).is_err());
    }

    #[test]
    fn json_validation() {
        let s = stats(&[0.3, 0.7]);
        assert_eq!(ActivationStats::from_json(&s.to_json().unwrap()).unwrap(), s);
        let mut bad = s.clone();
        bad.counts.get_mut("d0").unwrap()[0][0] = 11;
        assert!(ActivationStats::from_json(&bad.to_json().unwrap()).is_err());
        assert!(s.heatmap_svg().starts_with("<svg"));
    }
}
