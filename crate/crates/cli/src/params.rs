//! Parameter-count tables.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use reattn_core::model::{count_params, ModelConfig};

/// Reads a model config file holding one config or a JSON list of them.
pub fn load_configs(path: &Path) -> Result<Vec<ModelConfig>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if text.trim_start().starts_with('[') {
        serde_json::from_str::<Vec<ModelConfig>>(&text)
    } else {
        serde_json::from_str::<ModelConfig>(&text).map(|c| vec![c])
    };
    let configs = parsed.with_context(|| format!("invalid model config in {}", path.display()))?;
    for c in &configs {
        c.validate().with_context(|| format!("{} in {}", c.display_name(), path.display()))?;
    }
    Ok(configs)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamRow {
    pub name: String,
    pub blocks: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub count: usize,
}

impl ParamRow {
    pub fn millions(&self) -> f64 {
        self.count as f64 / 1e6
    }
}

pub fn param_rows(configs: &[ModelConfig]) -> Vec<ParamRow> {
    configs
        .iter()
        .map(|c| ParamRow {
            name: c.display_name(),
            blocks: c.num_blocks,
            embed_dim: c.embed_dim,
            mlp_hidden: c.mlp_hidden,
            count: count_params(c),
        })
        .collect()
}

pub fn format_table(rows: &[ParamRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<w$}  {:>6}  {:>9}  {:>8}  {:>12}  {:>9}\n", "name", "blocks", "embed_dim", "mlp", "params", "millions");
    for r in rows {
        s.push_str(&format!(
            "{:<w$}  {:>6}  {:>9}  {:>8}  {:>12}  {:>8.2}M\n",
            r.name,
            r.blocks,
            r.embed_dim,
            r.mlp_hidden,
            r.count,
            r.millions()
        ));
    }
    s
}
