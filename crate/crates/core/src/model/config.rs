use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariant, NormMode};
use crate::error::{Error, Result};

fn default_channels() -> usize {
    3
}

/// Architecture of a ViT/DeepViT classifier.
///
/// `block_variants` is always stored as one entry per block. In JSON it may
/// also be given as a split string `"<vanilla>-<reattention>"` (for example
/// `"11-5"`: eleven vanilla blocks followed by five re-attention blocks) or
/// as a single variant object applied to every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelConfig")]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub block_variants: Vec<AttentionVariant>,
    /// Every block after this index reuses its attention map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_from: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawVariants {
    List(Vec<AttentionVariant>),
    Split(String),
    Uniform(AttentionVariant),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelConfig {
    #[serde(default)]
    name: Option<String>,
    image_size: usize,
    patch_size: usize,
    #[serde(default = "default_channels")]
    in_channels: usize,
    num_classes: usize,
    num_blocks: usize,
    embed_dim: usize,
    num_heads: usize,
    mlp_hidden: usize,
    block_variants: RawVariants,
    #[serde(default)]
    shared_from: Option<usize>,
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = String;

    fn try_from(raw: RawModelConfig) -> std::result::Result<Self, String> {
        let block_variants = match raw.block_variants {
            RawVariants::List(v) => v,
            RawVariants::Uniform(v) => vec![v; raw.num_blocks],
            RawVariants::Split(s) => {
                let (v, r) = parse_split(&s).map_err(|e| e.to_string())?;
                if v + r != raw.num_blocks {
                    return Err(format!("split \"{s}\" covers {} blocks, num_blocks is {}", v + r, raw.num_blocks));
                }
                split_variants(v, r)
            }
        };
        Ok(ModelConfig {
            name: raw.name,
            image_size: raw.image_size,
            patch_size: raw.patch_size,
            in_channels: raw.in_channels,
            num_classes: raw.num_classes,
            num_blocks: raw.num_blocks,
            embed_dim: raw.embed_dim,
            num_heads: raw.num_heads,
            mlp_hidden: raw.mlp_hidden,
            block_variants,
            shared_from: raw.shared_from,
        })
    }
}

/// Parses `"<vanilla>-<reattention>"` into its two block counts.
pub fn parse_split(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("split \"{s}\" is not of the form <vanilla>-<reattention>"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// `vanilla` vanilla blocks followed by `reattention` re-attention blocks.
pub fn split_variants(vanilla: usize, reattention: usize) -> Vec<AttentionVariant> {
    let mut v = vec![AttentionVariant::Vanilla; vanilla];
    v.extend(std::iter::repeat_n(AttentionVariant::re_attention(), reattention));
    v
}

impl ModelConfig {
    /// ImageNet-scale ViT: 224×224 RGB, patch 16, 1000 classes, MLP ratio 3.
    pub fn vit(num_blocks: usize, embed_dim: usize, num_heads: usize) -> Self {
        ModelConfig {
            name: Some(format!("ViT-{num_blocks}B-D{embed_dim}")),
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            num_classes: 1000,
            num_blocks,
            embed_dim,
            num_heads,
            mlp_hidden: 3 * embed_dim,
            block_variants: vec![AttentionVariant::Vanilla; num_blocks],
            shared_from: None,
        }
    }

    /// Every block uses `variant`.
    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.block_variants = vec![variant; self.num_blocks];
        self
    }

    /// Blocks after `anchor` reuse its map through shared-attention blocks.
    pub fn with_sharing(mut self, anchor: usize, norm_mode: NormMode) -> Self {
        self.shared_from = Some(anchor);
        for v in self.block_variants.iter_mut().skip(anchor + 1) {
            *v = AttentionVariant::Shared { norm_mode };
        }
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("B{}-D{}", self.num_blocks, self.embed_dim))
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.block_variants.len() != self.num_blocks {
            return fail(format!(
                "block_variants has {} entries for {} blocks",
                self.block_variants.len(),
                self.num_blocks
            ));
        }
        for (b, v) in self.block_variants.iter().enumerate() {
            v.validate().map_err(|e| Error::config(format!("block {b}: {e}")))?;
        }
        match self.shared_from {
            Some(k) => {
                if k + 1 >= self.num_blocks {
                    return fail(format!("shared_from {k} must be < num_blocks - 1 = {}", self.num_blocks.saturating_sub(1)));
                }
                for (b, v) in self.block_variants.iter().enumerate() {
                    let shared = matches!(v, AttentionVariant::Shared { .. });
                    if b <= k && shared {
                        return fail(format!("block {b} is shared but precedes or is the anchor {k}"));
                    }
                    if b > k && !shared {
                        return fail(format!("block {b} follows shared_from {k} but is {}", v.name()));
                    }
                }
            }
            None => {
                if let Some(b) = self.block_variants.iter().position(|v| matches!(v, AttentionVariant::Shared { .. })) {
                    return fail(format!("block {b} is shared but shared_from is unset"));
                }
            }
        }
        Ok(())
    }
}
