use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AdamState;
use crate::checksum::{sha256_bytes, Sha256Hex};
use crate::error::{Error, Result};
use crate::model::{param_slots, EncoderParams, MaskSet, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DOGECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hard cap on header size and on total payload elements, so a corrupt
/// length field cannot trigger a huge allocation.
const MAX_HEADER: u64 = 1 << 24;
const MAX_ELEMENTS: usize = 1 << 28;

/// Parameters, masks and optimizer state at one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: EncoderParams,
    pub masks: MaskSet,
    pub optimizer: Option<AdamState>,
    pub dev_metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    /// `f64::to_bits` so the value survives JSON exactly.
    dev_metric_bits: Option<u64>,
    mask_bits: Vec<u64>,
    masks_tracked: bool,
    optimizer_t: Option<u64>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let slots = param_slots(&self.params.config);
        let mut tensors: Vec<&Tensor> = self.params.tensors();
        let mut entries: Vec<TensorEntry> =
            slots.iter().map(|s| TensorEntry { name: s.name.clone(), shape: s.shape.clone() }).collect();
        if let Some(opt) = &self.optimizer {
            for (kind, list) in [("m", &opt.m), ("v", &opt.v)] {
                for (s, t) in slots.iter().zip(list) {
                    entries.push(TensorEntry { name: format!("adam.{kind}.{}", s.name), shape: t.shape().to_vec() });
                    tensors.push(t);
                }
            }
        }
        let mut payload = Vec::with_capacity(8 * tensors.iter().map(|t| t.numel()).sum::<usize>());
        for t in &tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.params.config.clone(),
            step: self.step,
            dev_metric_bits: self.dev_metric.map(f64::to_bits),
            mask_bits: self.masks.values().into_iter().map(f64::to_bits).collect(),
            masks_tracked: self.masks.is_tracked(),
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            tensors: entries,
            payload_sha256: sha256_bytes(&payload),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER || 20 + header_len as usize > bytes.len() {
            return Err(corrupt("header length out of range"));
        }
        let header_end = 20 + header_len as usize;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];
        if sha256_bytes(payload) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        header.config.validate().map_err(|e| corrupt(&format!("bad config: {e}")))?;

        let mut total = 0usize;
        for e in &header.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| corrupt("tensor size overflow"))?;
            total = total.checked_add(n).filter(|t| *t <= MAX_ELEMENTS).ok_or_else(|| corrupt("payload too large"))?;
        }
        if payload.len() != total * 8 {
            return Err(corrupt("payload length does not match tensor table"));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }

        let slots = param_slots(&header.config);
        let expected = match header.optimizer_t {
            Some(_) => 3 * slots.len(),
            None => slots.len(),
        };
        if tensors.len() != expected {
            return Err(corrupt("tensor table does not match the model layout"));
        }
        for (i, e) in header.tensors.iter().take(slots.len()).enumerate() {
            if e.name != slots[i].name {
                return Err(corrupt(&format!("unexpected tensor {:?}", e.name)));
            }
        }
        let optimizer = match header.optimizer_t {
            Some(t) => {
                let v = tensors.split_off(2 * slots.len());
                let m = tensors.split_off(slots.len());
                for (s, (a, b)) in slots.iter().zip(m.iter().zip(&v)) {
                    if a.shape() != s.shape.as_slice() || b.shape() != s.shape.as_slice() {
                        return Err(Error::shape("optimizer state", &s.shape, a.shape()));
                    }
                }
                Some(AdamState { t, m, v })
            }
            None => None,
        };
        let params = EncoderParams::from_tensors(header.config.clone(), tensors)?;
        let mask_values: Vec<f64> = header.mask_bits.iter().map(|b| f64::from_bits(*b)).collect();
        let masks = MaskSet::from_values(&header.config, &mask_values, header.masks_tracked)?;
        Ok(Checkpoint {
            step: header.step,
            params,
            masks,
            optimizer,
            dev_metric: header.dev_metric_bits.map(f64::from_bits),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored model matches `config` exactly.
    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.expect_config(config)?;
        Ok(ckpt)
    }

    pub fn expect_config(&self, config: &ModelConfig) -> Result<()> {
        let stored = &self.params.config;
        let shapes = |c: &ModelConfig| param_slots(c).into_iter().map(|s| s.shape).collect::<Vec<_>>();
        if shapes(stored) != shapes(config) {
            let flat = |c: &ModelConfig| shapes(c).into_iter().flatten().collect::<Vec<_>>();
            return Err(Error::Shape {
                op: "checkpoint config",
                lhs: flat(config),
                rhs: flat(stored),
            });
        }
        if stored != config {
            return Err(Error::Config("checkpoint was written for a different model config".into()));
        }
        Ok(())
    }

    /// Hash over step, parameters, masks and optimizer state.
    pub fn checksum(&self) -> String {
        let mut h = Sha256Hex::new();
        h.update(&self.step.to_le_bytes());
        h.update(self.params.checksum().as_bytes());
        for v in self.masks.values() {
            h.update(&v.to_le_bytes());
        }
        if let Some(o) = &self.optimizer {
            h.update(&o.t.to_le_bytes());
            for t in o.m.iter().chain(&o.v) {
                h.update_tensor(t);
            }
        }
        if let Some(d) = self.dev_metric {
            h.update(&d.to_le_bytes());
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(with_opt: bool) -> Checkpoint {
        let cfg = ModelConfig { layers: 1, heads: 2, d_model: 4, d_head: 2, d_inner: 3, max_len: 4, vocab_size: 7, ..Default::default() };
        let params = EncoderParams::init(&cfg, 4).unwrap();
        let mut masks = MaskSet::ones(&cfg);
        masks.prune(crate::model::ElementId::head(0, 1)).unwrap();
        let mut optimizer = with_opt.then(|| AdamState::new(&params));
        if let Some(o) = optimizer.as_mut() {
            o.t = 3;
            o.m[0].data_mut()[0] = 0.1 + 0.2;
        }
        Checkpoint { step: 17, params, masks, optimizer, dev_metric: Some(1.0 / 3.0) }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for with_opt in [false, true] {
            let c = ckpt(with_opt);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.checksum(), c.checksum());
        }
    }

    #[test]
    fn wrong_version_is_explicit() {
        let mut b = ckpt(false).to_bytes();
        b[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Version { found: 9, expected: 1 })));
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let mut b = ckpt(false).to_bytes();
        let n = b.len();
        b[n - 3] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&b[..n - 8]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"DOGE"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_config_is_shape_error() {
        let c = ckpt(false);
        let other = ModelConfig { d_inner: 5, ..c.params.config.clone() };
        assert!(matches!(c.expect_config(&other), Err(Error::Shape { .. })));
        assert!(c.expect_config(&c.params.config).is_ok());
    }
}
