use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ElementId, ModelConfig};
use crate::checksum::Sha256Hex;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Which pruning element (if any) owns a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Shared,
    Element(ElementId),
}

/// Name, owner and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub owner: Owner,
    pub shape: Vec<usize>,
    /// Weight decay applies to matrices only.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Output-projection bias, shared by all heads.
    pub b_o: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_norm_gain: Tensor,
    pub embed_norm_bias: Tensor,
    pub layers: Vec<LayerParams>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

/// Slot layout in canonical order. Everything that iterates parameters
/// (optimizer, checkpoints, checksums) follows this order.
pub fn param_slots(config: &ModelConfig) -> Vec<ParamSlot> {
    let (d, dh, di) = (config.d_model, config.d_head, config.d_inner);
    let mut slots = Vec::new();
    let mut push = |name: String, owner: Owner, shape: Vec<usize>| {
        let decay = shape.len() == 2;
        slots.push(ParamSlot { name, owner, shape, decay });
    };
    push("token_embedding".into(), Owner::Shared, vec![config.vocab_size, d]);
    push("position_embedding".into(), Owner::Shared, vec![config.max_len, d]);
    push("embed_norm.gain".into(), Owner::Shared, vec![d]);
    push("embed_norm.bias".into(), Owner::Shared, vec![d]);
    for l in 0..config.layers {
        for h in 0..config.heads {
            let owner = Owner::Element(ElementId::head(l, h));
            for (name, shape) in [
                ("w_q", vec![d, dh]),
                ("b_q", vec![dh]),
                ("w_k", vec![d, dh]),
                ("b_k", vec![dh]),
                ("w_v", vec![d, dh]),
                ("b_v", vec![dh]),
                ("w_o", vec![dh, d]),
            ] {
                push(format!("layer{l}.head{h}.{name}"), owner, shape);
            }
        }
        push(format!("layer{l}.b_o"), Owner::Shared, vec![d]);
        push(format!("layer{l}.attn_norm.gain"), Owner::Shared, vec![d]);
        push(format!("layer{l}.attn_norm.bias"), Owner::Shared, vec![d]);
        let ffn = Owner::Element(ElementId::ffn(l));
        push(format!("layer{l}.ffn.w_1"), ffn, vec![d, di]);
        push(format!("layer{l}.ffn.b_1"), ffn, vec![di]);
        push(format!("layer{l}.ffn.w_2"), ffn, vec![di, d]);
        push(format!("layer{l}.ffn.b_2"), ffn, vec![d]);
        push(format!("layer{l}.ffn_norm.gain"), Owner::Shared, vec![d]);
        push(format!("layer{l}.ffn_norm.bias"), Owner::Shared, vec![d]);
    }
    push("classifier.w".into(), Owner::Shared, vec![d, config.num_classes]);
    push("classifier.b".into(), Owner::Shared, vec![config.num_classes]);
    slots
}

impl EncoderParams {
    /// Deterministic initialization: N(0, 0.02) for matrices and embeddings,
    /// zeros for biases, ones for norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = param_slots(config)
            .into_iter()
            .map(|slot| {
                let numel: usize = slot.shape.iter().product();
                let data = if slot.shape.len() == 2 {
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                } else if slot.name.ends_with(".gain") {
                    vec![1.0; numel]
                } else {
                    vec![0.0; numel]
                };
                Tensor::new(slot.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config.clone(), tensors)
    }

    /// Rebuilds params from tensors in [`param_slots`] order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let slots = param_slots(&config);
        if slots.len() != tensors.len() {
            return Err(Error::shape("param tensors", &[slots.len()], &[tensors.len()]));
        }
        for (slot, t) in slots.iter().zip(&tensors) {
            if slot.shape != t.shape() {
                return Err(Error::shape("param slot", &slot.shape, t.shape()));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let embed_norm_gain = next();
        let embed_norm_bias = next();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let heads = (0..config.heads)
                .map(|_| HeadParams {
                    w_q: next(),
                    b_q: next(),
                    w_k: next(),
                    b_k: next(),
                    w_v: next(),
                    b_v: next(),
                    w_o: next(),
                })
                .collect();
            layers.push(LayerParams {
                heads,
                b_o: next(),
                attn_norm_gain: next(),
                attn_norm_bias: next(),
                w_1: next(),
                b_1: next(),
                w_2: next(),
                b_2: next(),
                ffn_norm_gain: next(),
                ffn_norm_bias: next(),
            });
        }
        let classifier_w = next();
        let classifier_b = next();
        Ok(EncoderParams {
            config,
            token_embedding,
            position_embedding,
            embed_norm_gain,
            embed_norm_bias,
            layers,
            classifier_w,
            classifier_b,
        })
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        param_slots(&self.config)
    }

    /// Tensors in slot order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.embed_norm_gain,
            &self.embed_norm_bias,
        ];
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend([&h.w_q, &h.b_q, &h.w_k, &h.b_k, &h.w_v, &h.b_v, &h.w_o]);
            }
            out.extend([
                &layer.b_o,
                &layer.attn_norm_gain,
                &layer.attn_norm_bias,
                &layer.w_1,
                &layer.b_1,
                &layer.w_2,
                &layer.b_2,
                &layer.ffn_norm_gain,
                &layer.ffn_norm_bias,
            ]);
        }
        out.extend([&self.classifier_w, &self.classifier_b]);
        out
    }

    /// Mutable tensors in slot order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_norm_gain,
            &mut self.embed_norm_bias,
        ];
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.extend([
                    &mut h.w_q, &mut h.b_q, &mut h.w_k, &mut h.b_k, &mut h.w_v, &mut h.b_v, &mut h.w_o,
                ]);
            }
            out.extend([
                &mut layer.b_o,
                &mut layer.attn_norm_gain,
                &mut layer.attn_norm_bias,
                &mut layer.w_1,
                &mut layer.b_1,
                &mut layer.w_2,
                &mut layer.b_2,
                &mut layer.ffn_norm_gain,
                &mut layer.ffn_norm_bias,
            ]);
        }
        out.extend([&mut self.classifier_w, &mut self.classifier_b]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// SHA-256 over every tensor's shape and little-endian values, in slot order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256Hex::new();
        for t in self.tensors() {
            h.update_tensor(t);
        }
        h.finish()
    }

    /// Tensors owned by one element.
    pub fn element_tensors(&self, id: ElementId) -> Vec<&Tensor> {
        self.slots()
            .iter()
            .zip(self.tensors())
            .filter(|(s, _)| s.owner == Owner::Element(id))
            .map(|(_, t)| t)
            .collect()
    }
}
