//! Masked post-norm transformer encoder with one mask scalar per attention
//! head and per FFN block.

mod config;
mod encoder;
mod masks;
mod params;

pub use config::{ModelConfig, TaskKind};
pub use encoder::{
    forward, forward_pass, mask_gradients, per_example_mask_gradients, ForwardOptions, ForwardPass,
    MaskGradients, Targets, TokenBatch,
};
pub use masks::{ElementId, ElementKind, MaskSet};
pub use params::{param_slots, EncoderParams, HeadParams, LayerParams, Owner, ParamSlot};
