//! Checkpoints: `manifest.json` (config plus tensor names and shapes) next to
//! `tensors.ratn`, the parameters then buffers in manifest order as
//! concatenated double-precision records.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{read_all, write_tensor};
use crate::numerics::Precision;

use super::{build_model, Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "reattn-checkpoint-v1";
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.ratn";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (epoch, step, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model, dir: &Path, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut entries = Vec::new();
    for p in model.params().iter() {
        entries.push(TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), kind: TensorKind::Param });
        tensors.push(p.tensor.clone());
    }
    for (name, t) in model.buffers() {
        entries.push(TensorEntry { name, shape: t.shape().to_vec(), kind: TensorKind::Buffer });
        tensors.push(t);
    }
    let mut w = BufWriter::new(File::create(dir.join(TENSORS))?);
    for t in &tensors {
        write_tensor(&mut w, t, Precision::Double)?;
    }
    w.flush()?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config().clone(),
        seed: model.seed(),
        tensors: entries,
        meta,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory. Any disagreement between
/// the manifest, the config it embeds and the stored tensors is a manifest error.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Manifest(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let mut model = build_model(&manifest.config, manifest.seed)
        .map_err(|e| Error::Manifest(format!("embedded config is invalid: {e}")))?;
    let tensors = read_all(&mut BufReader::new(File::open(dir.join(TENSORS))?))?;
    if tensors.len() != manifest.tensors.len() {
        return Err(Error::Manifest(format!(
            "manifest lists {} tensors, file holds {}",
            manifest.tensors.len(),
            tensors.len()
        )));
    }
    let expected_params: Vec<(&str, &[usize])> =
        model.params().iter().map(|p| (p.name.as_str(), p.tensor.shape())).collect();
    let listed: Vec<(&str, &[usize])> = manifest
        .tensors
        .iter()
        .filter(|e| e.kind == TensorKind::Param)
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    if listed != expected_params {
        return Err(Error::Manifest("parameter list does not match the embedded config".into()));
    }
    let mut buffers = HashMap::new();
    let mut updates = Vec::new();
    for (entry, t) in manifest.tensors.iter().zip(tensors) {
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Manifest(format!("{} stored as {:?}, listed as {:?}", entry.name, t.shape(), entry.shape)));
        }
        match entry.kind {
            TensorKind::Param => updates.push((entry.name.clone(), t)),
            TensorKind::Buffer => {
                buffers.insert(entry.name.clone(), t);
            }
        }
    }
    for (name, t) in updates {
        model.set_param(&name, &t)?;
    }
    model.set_buffers(&buffers)?;
    Ok((model, manifest))
}
