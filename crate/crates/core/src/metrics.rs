//! Batched prediction and classification metrics.

use std::collections::BTreeSet;

use crate::data::{batches, Example, Grouping, Label, Order};
use crate::error::{Error, Result};
use crate::model::{forward_pass, EncoderParams, ForwardOptions, MaskSet, TaskKind};

/// Predicted labels per example, in input order. Pruned elements are
/// removed structurally.
pub fn predict(params: &EncoderParams, masks: &MaskSet, examples: &[&Example], batch_size: usize) -> Result<Vec<Label>> {
    let mut masks = masks.clone();
    masks.set_tracked(false);
    let opts = ForwardOptions { remove_pruned: true, ..Default::default() };
    let mut out = Vec::with_capacity(examples.len());
    for batch in batches(examples, batch_size, Order::Sequential, Grouping::Mixed)? {
        let pass = forward_pass(params, &masks, &batch.tokens, opts)?;
        for p in pass.predictions() {
            out.push(match params.config.task {
                TaskKind::SequenceClassification => Label::Class(p[0]),
                TaskKind::TokenTagging => Label::Tags(p),
            });
        }
    }
    Ok(out)
}

fn units(labels: &[&Label]) -> Vec<usize> {
    labels
        .iter()
        .flat_map(|l| match l {
            Label::Class(c) => vec![*c],
            Label::Tags(t) => t.clone(),
        })
        .collect()
}

fn paired(gold: &[&Label], pred: &[Label]) -> Result<(Vec<usize>, Vec<usize>)> {
    if gold.len() != pred.len() {
        return Err(Error::shape("metric inputs", &[gold.len()], &[pred.len()]));
    }
    let g = units(gold);
    let p = units(&pred.iter().collect::<Vec<_>>());
    if g.len() != p.len() || g.is_empty() {
        return Err(Error::Contract("gold and predicted labels do not align".into()));
    }
    Ok((g, p))
}

/// Fraction of correctly labelled units (examples, or tokens for tagging).
pub fn accuracy(gold: &[&Label], pred: &[Label]) -> Result<f64> {
    let (g, p) = paired(gold, pred)?;
    Ok(g.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / g.len() as f64)
}

/// Unweighted mean of per-class F1 over classes occurring in gold or
/// predicted labels.
pub fn macro_f1(gold: &[&Label], pred: &[Label]) -> Result<f64> {
    let (g, p) = paired(gold, pred)?;
    let classes: BTreeSet<usize> = g.iter().chain(&p).copied().collect();
    let mut total = 0.0;
    for c in &classes {
        let tp = g.iter().zip(&p).filter(|(a, b)| *a == c && *b == c).count() as f64;
        let fp = g.iter().zip(&p).filter(|(a, b)| *a != c && *b == c).count() as f64;
        let fn_ = g.iter().zip(&p).filter(|(a, b)| *a == c && *b != c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / classes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[usize]) -> Vec<Label> {
        v.iter().map(|c| Label::Class(*c)).collect()
    }

    #[test]
    fn accuracy_and_f1_by_hand() {
        let gold = labels(&[0, 0, 1, 1, 2]);
        let pred = labels(&[0, 1, 1, 1, 0]);
        let g: Vec<&Label> = gold.iter().collect();
        assert_eq!(accuracy(&g, &pred).unwrap(), 0.6);
        // class 0: tp1 fp1 fn1 -> 0.5; class 1: tp2 fp1 fn0 -> 0.8; class 2: 0
        assert!((macro_f1(&g, &pred).unwrap() - 1.3 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tagging_counts_tokens() {
        let gold = [Label::Tags(vec![0, 1, 1]), Label::Tags(vec![2])];
        let pred = vec![Label::Tags(vec![0, 1, 0]), Label::Tags(vec![2])];
        let g: Vec<&Label> = gold.iter().collect();
        assert_eq!(accuracy(&g, &pred).unwrap(), 0.75);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let gold = labels(&[0, 1]);
        let g: Vec<&Label> = gold.iter().collect();
        assert!(accuracy(&g, &labels(&[0])).is_err());
    }
}
