//! SHA-256 helpers used for reproducibility checksums.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::tensor::Tensor;

pub struct Sha256Hex(Sha256);

impl Sha256Hex {
    pub fn new() -> Self {
        Sha256Hex(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn update_tensor(&mut self, t: &Tensor) {
        self.0.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            self.0.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

impl Default for Sha256Hex {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}
