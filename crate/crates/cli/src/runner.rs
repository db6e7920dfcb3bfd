//! Executes the runs of an experiment spec.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use reattn_core::model::build_model;
use reattn_core::training::{train, Dataset, EpochRecord};

use crate::spec::{ExperimentSpec, RunPlan};

/// What one finished run reports in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub dir: PathBuf,
    pub seed: u64,
    pub num_params: usize,
    pub epochs: usize,
    pub last: Option<EpochRecord>,
}

/// Worker count from `REATTN_THREADS`, at least 1; defaults to 1.
pub fn thread_budget() -> usize {
    std::env::var("REATTN_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(1).max(1)
}

fn run_one(spec: &ExperimentSpec, plan: &RunPlan, train_set: &Dataset, eval_set: &Dataset) -> Result<RunSummary> {
    let dir = if plan.label.is_empty() { spec.run_root() } else { spec.run_root().join(&plan.label) };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(plan)?)?;
    let mut model = build_model(&plan.model, plan.train.seed)?;
    let log = train(&mut model, train_set, eval_set, &plan.train, Some(&dir))
        .with_context(|| format!("run {:?}", if plan.label.is_empty() { &spec.name } else { &plan.label }))?;
    let summary = RunSummary {
        label: plan.label.clone(),
        dir: dir.clone(),
        seed: plan.train.seed,
        num_params: model.num_params(),
        epochs: log.records.len(),
        last: log.records.last().cloned(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Runs every entry of the spec, at most `threads` at a time. The dataset is
/// loaded once and shared; each run writes only inside its own directory.
pub fn run_experiment(spec: &ExperimentSpec, threads: usize) -> Result<Vec<RunSummary>> {
    spec.validate()?;
    let plans = spec.plans()?;
    let (train_set, eval_set) = spec.dataset.load().context("loading dataset")?;
    let root = spec.run_root();
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    fs::write(root.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    if spec.ablation.is_some() {
        let index: Vec<_> = plans
            .iter()
            .map(|p| serde_json::json!({ "label": p.label, "seed": p.train.seed, "model": p.model.display_name() }))
            .collect();
        fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&index)?)?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..plans.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, plans.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= plans.len() {
                    break;
                }
                let r = run_one(spec, &plans[i], &train_set, &eval_set);
                results.lock().expect("result slot lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result slot lock")
        .into_iter()
        .map(|r| r.expect("every plan ran"))
        .collect()
}
