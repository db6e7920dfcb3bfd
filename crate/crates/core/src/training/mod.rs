//! Losses, AdamW, the warmup-cosine schedule, datasets and the epoch loop.

mod data;
mod loss;
mod optim;
mod schedule;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{similarity_report, SimilarityReport, Thresholds};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, save_checkpoint, Mode, Model};
use crate::numerics::{Precision, Tape, Tensor};

pub use data::{
    cifar10_files, load_cifar10, parse_cifar10, shuffled, spawn_batches, synthetic, Batch, Dataset, DatasetSpec,
    SyntheticConfig, CIFAR_CLASSES, CIFAR_SIZE,
};
pub use loss::{cross_entropy, default_reg_blocks, mean_map_cosine, similarity_regularized_loss};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use schedule::lr_at;

fn d_base_lr() -> f64 {
    5e-4
}
fn d_warmup() -> usize {
    3
}
fn d_batch() -> usize {
    64
}
fn d_weight_decay() -> f64 {
    0.05
}
fn d_lambda() -> f64 {
    0.1
}
fn d_probe() -> usize {
    32
}
fn d_queue() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Weight of the adjacent-map similarity penalty.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Highest pair index `l` in the penalty; pairs `(l, l+1)` for `l = 0 ..= reg_blocks`.
    /// Defaults by depth for 16, 24 and 32 blocks and is required otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_blocks: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Held-out samples used for the per-epoch diagnostics report.
    #[serde(default = "d_probe")]
    pub probe_size: usize,
    /// Save a checkpoint every this many epochs (needs an output directory).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Prepared batches buffered ahead of the training step.
    #[serde(default = "d_queue")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_average_window: Option<usize>,
}

impl TrainConfig {
    pub fn new(total_epochs: usize) -> Self {
        TrainConfig {
            base_lr: d_base_lr(),
            warmup_epochs: d_warmup().min(total_epochs.saturating_sub(1)),
            total_epochs,
            batch_size: d_batch(),
            weight_decay: d_weight_decay(),
            lambda: d_lambda(),
            reg_blocks: None,
            seed: 0,
            precision: Precision::Single,
            probe_size: d_probe(),
            checkpoint_every: None,
            queue_capacity: d_queue(),
            thresholds: Thresholds::default(),
            moving_average_window: None,
        }
    }

    /// The regulariser's `reg_blocks` for a model of `num_blocks` blocks.
    pub fn resolved_reg_blocks(&self, num_blocks: usize) -> Result<usize> {
        if self.lambda == 0.0 {
            return Ok(self.reg_blocks.unwrap_or(0));
        }
        let r = self.reg_blocks.or_else(|| default_reg_blocks(num_blocks)).ok_or_else(|| {
            Error::config(format!("reg_blocks has no default for {num_blocks} blocks; set it explicitly"))
        })?;
        if r + 2 > num_blocks {
            return Err(Error::config(format!("reg_blocks {r} needs at least {} blocks, model has {num_blocks}", r + 2)));
        }
        Ok(r)
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if let Some(r) = self.reg_blocks {
            if r >= num_blocks {
                return Err(Error::config(format!("reg_blocks {r} must be below num_blocks {num_blocks}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("base_lr and weight_decay must be non-negative"));
        }
        self.thresholds.validate()?;
        self.resolved_reg_blocks(num_blocks).map(|_| ())
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub similar_block_count: usize,
    pub adj_ratios: Vec<f64>,
    pub mean_adj_cosine: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// The probe report of each epoch.
    pub reports: Vec<SimilarityReport>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Evaluation-mode top-1 accuracy over `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, precision: Precision) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0.0;
    for b in data.batches(&order, batch_size) {
        let trace = model.infer(&b.images, precision)?;
        hits += accuracy(&trace.logits, &b.labels) * b.labels.len() as f64;
    }
    Ok(hits / data.len() as f64)
}

/// Diagnostics of an evaluation-mode pass over `probe`.
pub fn probe_report(model: &Model, probe: &Dataset, thresholds: Thresholds, window: Option<usize>, precision: Precision) -> Result<SimilarityReport> {
    let trace = model.infer(probe.images(), precision)?;
    similarity_report(&trace, thresholds, window)
}

fn check_compat(model: &Model, data: &Dataset) -> Result<()> {
    let c = model.config();
    if data.num_classes() != c.num_classes || data.channels() != c.in_channels || data.image_size() != c.image_size {
        return Err(Error::config(format!(
            "dataset ({} classes, {} channels, {}px) does not match model ({} classes, {} channels, {}px)",
            data.num_classes(),
            data.channels(),
            data.image_size(),
            c.num_classes,
            c.in_channels,
            c.image_size
        )));
    }
    Ok(())
}

/// Trains `model` in place. Deterministic given `config.seed`.
///
/// With `out_dir` set, appends each record to `log.jsonl`, writes every
/// probe report to `reports/epoch_NNN.json` (`epoch_000` is the
/// initialization) and saves checkpoints under
/// `checkpoints/`. A non-finite loss or activation aborts with
/// [`Error::Diverged`] naming the last checkpoint written.
pub fn train(model: &mut Model, train_set: &Dataset, eval_set: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<RunLog> {
    let num_blocks = model.config().num_blocks;
    config.validate(num_blocks)?;
    check_compat(model, train_set)?;
    check_compat(model, eval_set)?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let reg_blocks = config.resolved_reg_blocks(num_blocks)?;
    let probe = eval_set.head(config.probe_size);
    let spe = train_set.len().div_ceil(config.batch_size);
    let total_steps = spe * config.total_epochs;
    let warmup_steps = spe * config.warmup_epochs;

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("reports"))?;
            Some(BufWriter::new(File::create(dir.join("log.jsonl"))?))
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        let report = probe_report(model, &probe, config.thresholds, config.moving_average_window, config.precision)?;
        let meta = serde_json::json!({ "epoch": 0, "step": 0 });
        fs::write(dir.join("reports").join("epoch_000.json"), serde_json::to_string_pretty(&report.to_json(meta)?)?)?;
    }
    let mut last_good: Option<PathBuf> = None;

    let mut optimizer = AdamW::new(
        AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() },
        model.params(),
    );
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mask_rng.set_stream(1);
    let mut log = RunLog::default();
    let mut step = 0usize;

    for epoch in 1..=config.total_epochs {
        let order = shuffled(train_set.len(), &mut data_rng);
        let (mut loss_sum, mut hits, mut seen, mut lr) = (0.0, 0.0, 0usize, 0.0);
        std::thread::scope(|scope| -> Result<()> {
            let (batches, _worker) = spawn_batches(scope, train_set, order, config.batch_size, config.queue_capacity);
            for batch in batches {
                lr = lr_at(step, config.base_lr, warmup_steps, total_steps);
                let diverged = |detail: String| Error::Diverged { epoch, step, detail, last_good: last_good.clone() };
                let mut tape = Tape::new(config.precision);
                let vars = match model.forward(&mut tape, &batch.images, Mode::Train(&mut mask_rng)) {
                    Ok(v) => v,
                    Err(Error::Numerical { location, detail }) => return Err(diverged(format!("{location}: {detail}"))),
                    Err(e) => return Err(e),
                };
                let loss =
                    similarity_regularized_loss(&mut tape, vars.logits, &batch.labels, &vars.maps, config.lambda, reg_blocks)?;
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(diverged(format!("loss is {loss_value}")));
                }
                let n = batch.labels.len();
                loss_sum += loss_value * n as f64;
                hits += accuracy(tape.value(vars.logits), &batch.labels) * n as f64;
                seen += n;
                tape.backward(loss)?;
                model.params_mut().load_grads(&tape)?;
                optimizer.step(model.params_mut(), lr)?;
                model.update_running_stats(&vars.norm_stats);
                step += 1;
            }
            Ok(())
        })?;

        let eval_acc = evaluate(model, eval_set, config.batch_size, config.precision)?;
        let report = probe_report(model, &probe, config.thresholds, config.moving_average_window, config.precision)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: hits / seen as f64,
            eval_acc,
            similar_block_count: report.similar_block_count,
            adj_ratios: report.adjacent_ratios.clone(),
            mean_adj_cosine: report.mean_adjacent_cosine(),
        };
        if let (Some(dir), Some(f)) = (out_dir, log_file.as_mut()) {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
            let meta = serde_json::json!({ "epoch": epoch, "step": step });
            fs::write(
                dir.join("reports").join(format!("epoch_{epoch:03}.json")),
                serde_json::to_string_pretty(&report.to_json(meta.clone())?)?,
            )?;
            if config.checkpoint_every.is_some_and(|k| k > 0 && epoch % k == 0) || epoch == config.total_epochs {
                let path = dir.join("checkpoints").join(format!("epoch_{epoch:03}"));
                save_checkpoint(model, &path, meta)?;
                last_good = Some(path);
            }
        }
        log.records.push(record);
        log.reports.push(report);
    }
    Ok(log)
}
