//! Attention variants: vanilla multi-head self-attention, re-attention
//! (head mixing through a learnable `H×H` matrix), temperature-scaled
//! softmax, drop-attention, and shared-map reuse.
//!
//! All operations work on batched per-head layouts: `Q`, `K`, `V` are
//! `[N, H, T, d]` and attention maps are `[N, H, T, T]`, rows indexing output
//! tokens and columns input tokens.

mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use ops::{
    apply_map, attention_map, drop_attention, merge_heads, mhsa, mix_heads, normalize_map, qkv_project,
    re_attention, shared_attention, split_heads, Linear, MapNorm, MapNormStats, MaskSource, QkvWeights,
    ReAttentionOutput, TemperatureArg,
};

/// Normalisation applied to mixed attention maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Batch normalisation per head; the statistics population is every
    /// `(sample, i, j)` entry of that head. Running statistics serve evaluation.
    #[default]
    Batch,
    /// Per-sample, per-head standardisation over the `T×T` entries.
    PerSample,
    Identity,
}

/// How the softmax temperature of a temperature-variant block is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureSetting {
    Fixed(f64),
    /// Optimised with the model; parameterised as `τ = exp(s)`, `s` starting at 0.
    Learnable,
    /// `τ` interpolated linearly from `start` at block 0 to `end` at the last block.
    LinearDecay { start: f64, end: f64 },
}

impl TemperatureSetting {
    pub fn default_decay() -> Self {
        TemperatureSetting::LinearDecay { start: 1.0, end: 0.5 }
    }

    /// Resolved fixed temperature for `block` of `num_blocks`, or `None` when learnable.
    pub fn resolve(&self, block: usize, num_blocks: usize) -> Option<f64> {
        match *self {
            TemperatureSetting::Fixed(t) => Some(t),
            TemperatureSetting::Learnable => None,
            TemperatureSetting::LinearDecay { start, end } => {
                if num_blocks <= 1 {
                    Some(start)
                } else {
                    Some(start - (start - end) * block as f64 / (num_blocks - 1) as f64)
                }
            }
        }
    }
}

pub const DEFAULT_DROP_RATE: f64 = 0.1;

fn default_drop_rate() -> f64 {
    DEFAULT_DROP_RATE
}

/// Per-block attention variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttentionVariant {
    #[default]
    Vanilla,
    ReAttention {
        #[serde(default)]
        norm_mode: NormMode,
    },
    Temperature {
        temperature: TemperatureSetting,
    },
    DropAttention {
        #[serde(default = "default_drop_rate")]
        drop_rate: f64,
    },
    /// Reuses the map of an earlier block; only `V` is computed here.
    Shared {
        #[serde(default)]
        norm_mode: NormMode,
    },
}

impl AttentionVariant {
    pub fn re_attention() -> Self {
        AttentionVariant::ReAttention { norm_mode: NormMode::Batch }
    }

    pub fn shared() -> Self {
        AttentionVariant::Shared { norm_mode: NormMode::Batch }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionVariant::Vanilla => "vanilla",
            AttentionVariant::ReAttention { .. } => "re_attention",
            AttentionVariant::Temperature { .. } => "temperature",
            AttentionVariant::DropAttention { .. } => "drop_attention",
            AttentionVariant::Shared { .. } => "shared",
        }
    }

    /// Whether the block owns a head-mixing matrix.
    pub fn has_theta(&self) -> bool {
        matches!(self, AttentionVariant::ReAttention { .. } | AttentionVariant::Shared { .. })
    }

    pub fn norm_mode(&self) -> Option<NormMode> {
        match *self {
            AttentionVariant::ReAttention { norm_mode } | AttentionVariant::Shared { norm_mode } => Some(norm_mode),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionVariant::DropAttention { drop_rate } if !(0.0..1.0).contains(&drop_rate) => {
                Err(Error::config(format!("drop_rate {drop_rate} outside [0, 1)")))
            }
            AttentionVariant::Temperature { temperature } => match temperature {
                TemperatureSetting::Fixed(t) if !(t > 0.0 && t.is_finite()) => {
                    Err(Error::config(format!("temperature {t} must be positive")))
                }
                TemperatureSetting::LinearDecay { start, end } if !(start > 0.0 && end > 0.0) => {
                    Err(Error::config(format!("temperature decay endpoints {start}..{end} must be positive")))
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// One sample's post-softmax attention: `[H, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Tensor,
}

impl AttentionMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::dim(format!("attention map must be [H, T, T], got {s:?}")));
        }
        Ok(AttentionMap { values })
    }

    /// Splits a batched `[N, H, T, T]` tensor into per-sample maps.
    pub fn from_batch(batch: &Tensor) -> Result<Vec<Self>> {
        if batch.rank() != 4 {
            return Err(Error::dim(format!("batched attention map must be rank 4, got {:?}", batch.shape())));
        }
        (0..batch.shape()[0]).map(|n| AttentionMap::new(batch.index_first(n))).collect()
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        let t = self.tokens();
        self.values.data()[(h * t + i) * t + j]
    }

    /// Contribution of input token `t` to every output token under head `h`:
    /// the column `A[h, :, t]`.
    pub fn column(&self, h: usize, t: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.tokens()).map(move |i| self.get(h, i, t))
    }

    /// Largest deviation of any row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        self.values
            .data()
            .chunks(self.tokens())
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Every row sums to 1 within `tol` and every entry lies in `[0, 1]`.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.row_sum_error() <= tol && self.values.data().iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Shannon entropy of each row, `[H * T]` in row-major order.
    pub fn row_entropies(&self) -> Vec<f64> {
        self.values
            .data()
            .chunks(self.tokens())
            .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .collect()
    }
}

/// Learnable `H×H` head-mixing matrix. Mixed head `h'` is `Σ_h θ[h, h']·A[h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMixMatrix {
    theta: Tensor,
}

pub const THETA_INIT_STD: f64 = 0.01;

impl HeadMixMatrix {
    pub fn new(theta: Tensor) -> Result<Self> {
        let s = theta.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::config(format!("head-mixing matrix must be square, got {s:?}")));
        }
        theta.check_finite("head-mixing matrix")?;
        Ok(HeadMixMatrix { theta })
    }

    pub fn identity(heads: usize) -> Self {
        HeadMixMatrix { theta: Tensor::eye(heads) }
    }

    /// Identity plus Gaussian noise of standard deviation [`THETA_INIT_STD`].
    pub fn init<R: Rng>(heads: usize, rng: &mut R) -> Self {
        let noise = Normal::new(0.0, THETA_INIT_STD).expect("valid std");
        let mut theta = Tensor::eye(heads);
        theta.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
        HeadMixMatrix { theta }
    }

    pub fn heads(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.theta
    }

    pub fn into_tensor(self) -> Tensor {
        self.theta
    }
}
