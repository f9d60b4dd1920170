use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderParams;
use crate::tensor::Tensor;

/// Adam moments and step count, one moment pair per parameter slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// One update. Slots whose gradient is `None` are left untouched,
    /// including their weight decay and moments.
    pub fn step(&self, state: &mut AdamState, params: &mut EncoderParams, grads: &[Option<Tensor>]) -> Result<()> {
        let slots = params.slots();
        if grads.len() != slots.len() || state.m.len() != slots.len() {
            return Err(Error::shape("optimizer slots", &[slots.len()], &[grads.len()]));
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, slot)) in params.tensors_mut().into_iter().zip(&slots).enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer grad", p.shape(), g.shape()));
            }
            let decay = if slot.decay { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = *w * decay - self.lr * update;
            }
        }
        Ok(())
    }
}
