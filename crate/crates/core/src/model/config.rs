use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// One label per sequence, read from the first token position.
    SequenceClassification,
    /// One label per token.
    TokenTagging,
}

/// Shape of the encoder. `heads * d_head` must equal `d_model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_inner: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_head: 16,
            d_inner: 128,
            max_len: 32,
            vocab_size: 200,
            num_classes: 3,
            task: TaskKind::SequenceClassification,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_inner", self.d_inner),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "heads ({}) x d_head ({}) must equal d_model ({})",
                self.heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    /// Parameters owned by one attention head: W_Q, W_K, W_V, W_O plus the
    /// three input-projection biases.
    pub fn head_param_count(&self) -> usize {
        4 * self.d_model * self.d_head + 3 * self.d_head
    }

    /// Parameters owned by one FFN block: W_1, W_2 and their biases.
    pub fn ffn_param_count(&self) -> usize {
        2 * self.d_model * self.d_inner + self.d_inner + self.d_model
    }
}
