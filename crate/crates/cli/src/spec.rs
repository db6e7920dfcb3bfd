//! Experiment spec files and their expansion into individual runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use reattn_core::attention::{AttentionVariant, NormMode};
use reattn_core::model::ModelConfig;
use reattn_core::training::{DatasetSpec, TrainConfig};

/// One sweep axis; the JSON object must hold exactly one of these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Ablation {
    Depth(Vec<usize>),
    EmbedDim(Vec<usize>),
    Variant(Vec<AttentionVariant>),
    /// Anchor blocks; every later block reuses the anchor's map.
    SharedFrom(Vec<usize>),
    Lambda(Vec<f64>),
}

impl Ablation {
    pub fn axis(&self) -> &'static str {
        match self {
            Ablation::Depth(_) => "depth",
            Ablation::EmbedDim(_) => "embed_dim",
            Ablation::Variant(_) => "variant",
            Ablation::SharedFrom(_) => "shared_from",
            Ablation::Lambda(_) => "lambda",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Ablation::Depth(v) | Ablation::EmbedDim(v) | Ablation::SharedFrom(v) => v.len(),
            Ablation::Variant(v) => v.len(),
            Ablation::Lambda(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Runs land in `<outputs>/<name>/`.
    pub outputs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
}

/// A fully resolved run: one model, one training config, one directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    /// Directory name under `<outputs>/<name>/`; empty for a single run.
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text).map_err(|e| {
            anyhow::anyhow!("spec parse error at line {}, column {}: {e}", e.line(), e.column())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn run_root(&self) -> PathBuf {
        self.outputs.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("name {:?} must be a non-empty path component", self.name);
        }
        if self.ablation.as_ref().is_some_and(Ablation::is_empty) {
            bail!("ablation list is empty");
        }
        for plan in self.plans()? {
            plan.model.validate().with_context(|| format!("run {:?}", plan.label))?;
            plan.train.validate(plan.model.num_blocks).with_context(|| format!("run {:?}", plan.label))?;
        }
        Ok(())
    }

    /// Expands the sweep; entry `i` trains with seed `train.seed + i`.
    pub fn plans(&self) -> Result<Vec<RunPlan>> {
        let Some(ablation) = &self.ablation else {
            return Ok(vec![RunPlan { label: String::new(), model: self.model.clone(), train: self.train.clone() }]);
        };
        let mut plans = Vec::with_capacity(ablation.len());
        for i in 0..ablation.len() {
            let mut model = self.model.clone();
            let mut train = self.train.clone();
            train.seed = self.train.seed.wrapping_add(i as u64);
            let value = match ablation {
                Ablation::Depth(v) => {
                    let d = v[i];
                    if model.shared_from.is_some() {
                        bail!("a depth sweep cannot resize a model with shared_from");
                    }
                    model.block_variants = vec![uniform_variant(&model)?; d];
                    model.num_blocks = d;
                    d.to_string()
                }
                Ablation::EmbedDim(v) => {
                    let d = v[i];
                    // keep the MLP ratio
                    model.mlp_hidden = (model.mlp_hidden as f64 * d as f64 / model.embed_dim as f64).round() as usize;
                    model.embed_dim = d;
                    d.to_string()
                }
                Ablation::Variant(v) => {
                    if model.shared_from.is_some() {
                        bail!("a variant sweep cannot apply to a model with shared_from");
                    }
                    model.block_variants = vec![v[i]; model.num_blocks];
                    v[i].name().to_string()
                }
                Ablation::SharedFrom(v) => {
                    let norm = uniform_variant(&model)?.norm_mode().unwrap_or(NormMode::Batch);
                    model = model.with_sharing(v[i], norm);
                    v[i].to_string()
                }
                Ablation::Lambda(v) => {
                    train.lambda = v[i];
                    v[i].to_string()
                }
            };
            if let Some(n) = &mut model.name {
                *n = format!("{n}-{}{value}", ablation.axis());
            }
            plans.push(RunPlan { label: format!("{i:02}_{}-{value}", ablation.axis()), model, train });
        }
        Ok(plans)
    }
}

fn uniform_variant(model: &ModelConfig) -> Result<AttentionVariant> {
    let first = model.block_variants.first().copied().unwrap_or(AttentionVariant::Vanilla);
    if model.block_variants.iter().any(|v| *v != first) {
        bail!("this sweep needs the same attention variant in every block");
    }
    Ok(first)
}
