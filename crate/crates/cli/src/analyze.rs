//! Diagnostics of a saved checkpoint on a probe set.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use reattn_core::diagnostics::{similarity_report, SimilarityReport, Thresholds};
use reattn_core::model::{load_checkpoint, ForwardTrace};
use reattn_core::numerics::io::write_tensor;
use reattn_core::numerics::{Precision, Tensor};
use reattn_core::training::DatasetSpec;

#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    pub probe: PathBuf,
    pub limit: Option<usize>,
    pub thresholds: Thresholds,
    pub window: Option<usize>,
    pub export_maps: bool,
    pub batch_size: usize,
    pub precision: Precision,
    /// Defaults to `<checkpoint>.analysis` next to the checkpoint.
    pub out: Option<PathBuf>,
}

impl AnalyzeOptions {
    pub fn new(probe: impl Into<PathBuf>) -> Self {
        AnalyzeOptions {
            probe: probe.into(),
            limit: None,
            thresholds: Thresholds::default(),
            window: None,
            export_maps: false,
            batch_size: 64,
            precision: Precision::Double,
            out: None,
        }
    }
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("row blocks share trailing extents")
}

/// Stacks per-batch traces along the sample axis, keeping shared maps shared.
fn merge_traces(traces: &[ForwardTrace]) -> ForwardTrace {
    if traces.len() == 1 {
        return traces[0].clone();
    }
    let blocks = traces[0].num_blocks();
    let logits = concat_rows(&traces.iter().map(|t| &t.logits).collect::<Vec<_>>());
    let block_features =
        (0..blocks).map(|b| concat_rows(&traces.iter().map(|t| &t.block_features[b]).collect::<Vec<_>>())).collect();
    let mut block_maps: Vec<Arc<Tensor>> = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let reused = (0..b).find(|&a| Arc::ptr_eq(&traces[0].block_maps[a], &traces[0].block_maps[b]));
        block_maps.push(match reused {
            Some(a) => block_maps[a].clone(),
            None => Arc::new(concat_rows(&traces.iter().map(|t| t.block_maps[b].as_ref()).collect::<Vec<_>>())),
        });
    }
    ForwardTrace { logits, block_features, block_maps }
}

pub fn default_out_dir(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "checkpoint".into());
    name.push(".analysis");
    checkpoint.with_file_name(name)
}

/// Runs an evaluation-mode pass of the checkpoint over the probe set and
/// writes `report.json`, `report.csv` and, if asked, raw maps under
/// `maps/batchNNN/blockBB_attn.ratn`. The checkpoint is only read.
pub fn analyze(checkpoint: &Path, opts: &AnalyzeOptions) -> Result<(SimilarityReport, PathBuf)> {
    let (model, manifest) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let probe = DatasetSpec::load_probe(&opts.probe, opts.limit)
        .with_context(|| format!("loading probe {}", opts.probe.display()))?;
    let cfg = model.config();
    if probe.channels() != cfg.in_channels || probe.image_size() != cfg.image_size {
        bail!(
            "probe images are {}×{}px with {} channels, model expects {}px with {}",
            probe.image_size(),
            probe.image_size(),
            probe.channels(),
            cfg.image_size,
            cfg.in_channels
        );
    }
    if probe.is_empty() {
        bail!("probe set is empty");
    }
    let out = opts.out.clone().unwrap_or_else(|| default_out_dir(checkpoint));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let order: Vec<usize> = (0..probe.len()).collect();
    let mut traces = Vec::new();
    for (i, batch) in probe.batches(&order, opts.batch_size).enumerate() {
        let trace = model.infer(&batch.images, opts.precision)?;
        if opts.export_maps {
            let dir = out.join("maps").join(format!("batch{i:03}"));
            fs::create_dir_all(&dir)?;
            for (b, map) in trace.block_maps.iter().enumerate() {
                let mut w = BufWriter::new(File::create(dir.join(format!("block{b:02}_attn.ratn")))?);
                write_tensor(&mut w, map, opts.precision)?;
            }
        }
        traces.push(trace);
    }
    let trace = merge_traces(&traces);
    let report = similarity_report(&trace, opts.thresholds, opts.window)?;
    let meta = serde_json::json!({
        "model": cfg.display_name(),
        "seed": manifest.seed,
        "checkpoint_meta": manifest.meta,
        "probe": opts.probe.display().to_string(),
        "precision": opts.precision,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report.to_json(meta)?)?)?;
    report.write_csv(File::create(out.join("report.csv"))?)?;
    Ok((report, out))
}
