use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Which structural block a mask variable gates. Heads order before the FFN
/// block of the same layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Head(usize),
    Ffn,
}

/// Identity of a prunable element. The derived ordering (layer, then heads
/// before FFN, then head index) is the tie-break used everywhere scores are
/// ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementId {
    pub layer: usize,
    pub kind: ElementKind,
}

impl ElementId {
    pub fn head(layer: usize, index: usize) -> Self {
        ElementId { layer, kind: ElementKind::Head(index) }
    }

    pub fn ffn(layer: usize) -> Self {
        ElementId { layer, kind: ElementKind::Ffn }
    }

    pub fn is_head(&self) -> bool {
        matches!(self.kind, ElementKind::Head(_))
    }

    /// Every prunable element of a model, in identity order.
    pub fn all(config: &ModelConfig) -> Vec<ElementId> {
        let mut out = Vec::with_capacity(config.layers * (config.heads + 1));
        for layer in 0..config.layers {
            out.extend((0..config.heads).map(|h| ElementId::head(layer, h)));
            out.push(ElementId::ffn(layer));
        }
        out
    }

    /// Parameters the element owns; used to weight sparsity.
    pub fn param_count(&self, config: &ModelConfig) -> usize {
        match self.kind {
            ElementKind::Head(_) => config.head_param_count(),
            ElementKind::Ffn => config.ffn_param_count(),
        }
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ElementKind::Head(h) => write!(f, "{}:head:{}", self.layer, h),
            ElementKind::Ffn => write!(f, "{}:ffn:0", self.layer),
        }
    }
}

impl FromStr for ElementId {
    type Err = Error;

    /// Accepts `layer:head:index`, `layer:ffn:0` and the short `layer:ffn`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad element id {s:?}"));
        let mut parts = s.split(':');
        let layer: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let kind = parts.next().ok_or_else(bad)?;
        let index = parts.next();
        if parts.next().is_some() {
            return Err(bad());
        }
        match (kind, index) {
            ("head", Some(i)) => Ok(ElementId::head(layer, i.parse().map_err(|_| bad())?)),
            ("ffn", None) | ("ffn", Some("0")) => Ok(ElementId::ffn(layer)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ElementId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ElementId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One mask scalar per head and per FFN block.
///
/// Outside scoring every value is 0.0 (pruned) or 1.0 (active). Tracked masks
/// get gradients during a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    values: BTreeMap<ElementId, f64>,
    tracked: bool,
}

impl MaskSet {
    /// All elements active, untracked.
    pub fn ones(config: &ModelConfig) -> Self {
        MaskSet {
            values: ElementId::all(config).into_iter().map(|e| (e, 1.0)).collect(),
            tracked: false,
        }
    }

    /// All elements at 1.0 and tracked, the state required for scoring.
    pub fn scoring(config: &ModelConfig) -> Self {
        MaskSet { tracked: true, ..MaskSet::ones(config) }
    }

    pub fn get(&self, id: ElementId) -> f64 {
        self.values.get(&id).copied().unwrap_or(1.0)
    }

    pub fn set(&mut self, id: ElementId, value: f64) -> Result<()> {
        match self.values.get_mut(&id) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(Error::Lookup(format!("no mask for element {id}"))),
        }
    }

    pub fn prune(&mut self, id: ElementId) -> Result<()> {
        self.set(id, 0.0)
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    pub fn set_tracked(&mut self, tracked: bool) {
        self.tracked = tracked;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ElementId, f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Elements whose mask is exactly zero.
    pub fn pruned(&self) -> Vec<ElementId> {
        self.values.iter().filter(|(_, v)| **v == 0.0).map(|(k, _)| *k).collect()
    }

    pub fn is_pruned(&self, id: ElementId) -> bool {
        self.get(id) == 0.0
    }

    pub fn all_active(&self) -> bool {
        self.values.values().all(|v| *v == 1.0)
    }

    pub fn is_binary(&self) -> bool {
        self.values.values().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.values.keys().copied().eq(ElementId::all(config))
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }

    pub(crate) fn from_values(config: &ModelConfig, values: &[f64], tracked: bool) -> Result<Self> {
        let ids = ElementId::all(config);
        if ids.len() != values.len() {
            return Err(Error::shape("mask set", &[ids.len()], &[values.len()]));
        }
        Ok(MaskSet {
            values: ids.into_iter().zip(values.iter().copied()).collect(),
            tracked,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_ids_round_trip_through_strings() {
        let cfg = ModelConfig::default();
        for id in ElementId::all(&cfg) {
            assert_eq!(id.to_string().parse::<ElementId>().unwrap(), id);
        }
        assert_eq!("3:ffn".parse::<ElementId>().unwrap(), ElementId::ffn(3));
        assert!("3:ffn:1".parse::<ElementId>().is_err());
        assert!("x:head:1".parse::<ElementId>().is_err());
        assert!("1:head".parse::<ElementId>().is_err());
    }

    #[test]
    fn identity_order_puts_heads_before_ffn() {
        assert!(ElementId::head(0, 3) < ElementId::ffn(0));
        assert!(ElementId::ffn(0) < ElementId::head(1, 0));
    }

    #[test]
    fn element_identities_are_unique() {
        let cfg = ModelConfig::default();
        let ids = ElementId::all(&cfg);
        let set: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(set.len(), ids.len());
        assert_eq!(ids.len(), cfg.layers * (cfg.heads + 1));
    }

    #[test]
    fn scoring_masks_are_ones_and_tracked() {
        let m = MaskSet::scoring(&ModelConfig::default());
        assert!(m.is_tracked());
        assert!(m.all_active());
    }
}
