use crate::attention::{AttentionVariant, NormMode, TemperatureSetting};

use super::ModelConfig;

/// Learnable scalars split by where they live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// Patch projection, class token, positional embeddings.
    pub embedding: usize,
    /// All transformer blocks.
    pub blocks: usize,
    /// Final norm and classifier.
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.blocks + self.head
    }
}

/// Learnable scalars of one block with the given variant.
pub fn block_params(config: &ModelConfig, variant: &AttentionVariant) -> usize {
    let d = config.embed_dim;
    let m = config.mlp_hidden;
    let h = config.num_heads;
    let linear = |i: usize, o: usize| i * o + o;
    let norms = 2 * 2 * d;
    let mlp = linear(d, m) + linear(m, d);
    let qk = 2 * linear(d, d);
    let attn = match *variant {
        AttentionVariant::Shared { .. } => linear(d, d) + linear(d, d),
        _ => qk + 2 * linear(d, d),
    };
    let extra = match *variant {
        AttentionVariant::ReAttention { norm_mode } | AttentionVariant::Shared { norm_mode } => {
            h * h + if norm_mode == NormMode::Identity { 0 } else { 2 * h }
        }
        AttentionVariant::Temperature { temperature: TemperatureSetting::Learnable } => 1,
        _ => 0,
    };
    norms + attn + mlp + extra
}

pub fn param_breakdown(config: &ModelConfig) -> ParamBreakdown {
    let d = config.embed_dim;
    let embedding = config.patch_dim() * d + d + d + config.tokens() * d;
    let blocks = config.block_variants.iter().map(|v| block_params(config, v)).sum();
    let head = 2 * d + d * config.num_classes + config.num_classes;
    ParamBreakdown { embedding, blocks, head }
}

/// Exact learnable-scalar count, including biases, norm affines, the class
/// token and positional embeddings.
pub fn count_params(config: &ModelConfig) -> usize {
    param_breakdown(config).total()
}
