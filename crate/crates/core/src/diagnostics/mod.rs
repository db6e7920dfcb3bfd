//! Attention-collapse measurements: per-token cross-layer cosine similarity,
//! thresholded similarity ratios, similar-block counts, unique-block
//! detection, cross-head similarity and feature similarity to the last block.
//!
//! Maps are compared through their columns `A[h, :, t]`, the contribution of
//! input token `t` to every output token. Everything here is read-only.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::numerics::Tensor;

/// Cosine of two vectors; `None` when either has zero norm.
fn cosine(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// `M[h, t]`: cosine of column `t` of head `h` between two layers' maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `[H, T]`
    pub values: Tensor,
    pub layer_pair: (usize, usize),
    /// Entries set to 0 because a column had zero norm.
    pub degenerate_entries: usize,
}

impl SimilarityMatrix {
    pub fn mean(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn cross_layer_similarity(p: &AttentionMap, q: &AttentionMap, layer_pair: (usize, usize)) -> Result<SimilarityMatrix> {
    if p.values().shape() != q.values().shape() {
        return Err(Error::dim(format!(
            "maps {:?} and {:?} differ in shape",
            p.values().shape(),
            q.values().shape()
        )));
    }
    let (h, t) = (p.heads(), p.tokens());
    let mut degenerate_entries = 0;
    let values = Tensor::from_fn(&[h, t], |i| {
        let (hh, tt) = (i / t, i % t);
        cosine(p.column(hh, tt), q.column(hh, tt)).unwrap_or_else(|| {
            degenerate_entries += 1;
            0.0
        })
    });
    Ok(SimilarityMatrix { values, layer_pair, degenerate_entries })
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("{name} {v} outside (0, 1)")))
    }
}

/// Fraction of entries strictly above `vector_threshold`.
pub fn similarity_ratio(m: &SimilarityMatrix, vector_threshold: f64) -> Result<f64> {
    check_threshold("vector_threshold", vector_threshold)?;
    Ok(ratio_above(m.values.data(), vector_threshold))
}

fn ratio_above(values: &[f64], threshold: f64) -> f64 {
    values.iter().filter(|&&v| v > threshold).count() as f64 / values.len() as f64
}

/// Ratios `S(b-1, b)` for every adjacent pair of one sample's maps.
pub fn adjacent_ratios(maps: &[AttentionMap], vector_threshold: f64) -> Result<Vec<f64>> {
    check_threshold("vector_threshold", vector_threshold)?;
    maps.windows(2)
        .enumerate()
        .map(|(b, w)| Ok(ratio_above(cross_layer_similarity(&w[0], &w[1], (b, b + 1))?.values.data(), vector_threshold)))
        .collect()
}

/// Per-pair ratios averaged over samples; `samples[n]` holds sample `n`'s per-block maps.
pub fn mean_adjacent_ratios(samples: &[Vec<AttentionMap>], vector_threshold: f64) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::param("no samples"))?;
    let mut acc = vec![0.0; first.len().saturating_sub(1)];
    for maps in samples {
        if maps.len() != first.len() {
            return Err(Error::dim("samples disagree on block count"));
        }
        for (a, r) in acc.iter_mut().zip(adjacent_ratios(maps, vector_threshold)?) {
            *a += r;
        }
    }
    acc.iter_mut().for_each(|a| *a /= samples.len() as f64);
    Ok(acc)
}

/// Blocks `b ≥ 1` whose ratio against block `b-1` exceeds `block_threshold`.
pub fn count_from_ratios(ratios: &[f64], block_threshold: f64) -> usize {
    ratios.iter().filter(|&&r| r > block_threshold).count()
}

/// Number of similar blocks in one sample's stack, with the per-pair ratios.
pub fn count_similar_blocks(maps: &[AttentionMap], vector_threshold: f64, block_threshold: f64) -> Result<(usize, Vec<f64>)> {
    if maps.len() < 2 {
        return Err(Error::param(format!("need at least 2 blocks, got {}", maps.len())));
    }
    check_threshold("block_threshold", block_threshold)?;
    let ratios = adjacent_ratios(maps, vector_threshold)?;
    Ok((count_from_ratios(&ratios, block_threshold), ratios))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueBlock {
    pub index: usize,
    /// No block qualified; `index` is the last block.
    pub degenerate: bool,
}

/// Largest `b` whose ratio against each existing neighbour is strictly below
/// `unique_threshold`. `ratios[b]` is `S(b, b+1)`.
pub fn last_unique_from_ratios(ratios: &[f64], unique_threshold: f64) -> UniqueBlock {
    let blocks = ratios.len() + 1;
    let unique = |b: usize| {
        let prev = b == 0 || ratios[b - 1] < unique_threshold;
        let next = b + 1 == blocks || ratios[b] < unique_threshold;
        prev && next
    };
    match (0..blocks).rev().find(|&b| unique(b)) {
        Some(index) => UniqueBlock { index, degenerate: false },
        None => UniqueBlock { index: blocks - 1, degenerate: true },
    }
}

pub fn find_last_unique_block(maps: &[AttentionMap], vector_threshold: f64, unique_threshold: f64) -> Result<UniqueBlock> {
    if maps.len() < 2 {
        return Err(Error::param(format!("need at least 2 blocks, got {}", maps.len())));
    }
    check_threshold("unique_threshold", unique_threshold)?;
    Ok(last_unique_from_ratios(&adjacent_ratios(maps, vector_threshold)?, unique_threshold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossHeadSimilarity {
    /// `matrix[h][h']`: fraction of tokens whose columns in heads `h` and
    /// `h'` have cosine above the vector threshold.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over `h ≠ h'`.
    pub mean: f64,
}

pub fn cross_head_similarity(map: &AttentionMap, vector_threshold: f64) -> Result<CrossHeadSimilarity> {
    let h = map.heads();
    if h < 2 {
        return Err(Error::param("cross-head similarity needs at least 2 heads"));
    }
    check_threshold("vector_threshold", vector_threshold)?;
    let t = map.tokens();
    let mut matrix = vec![vec![0.0; h]; h];
    for a in 0..h {
        for b in 0..h {
            let above = (0..t)
                .filter(|&tt| cosine(map.column(a, tt), map.column(b, tt)).unwrap_or(0.0) > vector_threshold)
                .count();
            matrix[a][b] = above as f64 / t as f64;
        }
    }
    let off: f64 = (0..h).flat_map(|a| (0..h).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| matrix[a][b]).sum();
    Ok(CrossHeadSimilarity { mean: off / (h * (h - 1)) as f64, matrix })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSimilarity {
    /// Per block, cosine with the last block averaged over samples.
    pub values: Vec<f64>,
    /// (block, sample) pairs set to 0 because a feature tensor had zero norm.
    pub degenerate: usize,
}

/// `features[b]` is block `b`'s `[N, ...]` output; each sample is flattened.
pub fn feature_similarity(features: &[Tensor]) -> Result<FeatureSimilarity> {
    let last = features.last().ok_or_else(|| Error::param("need at least 1 block"))?;
    let n = last.shape().first().copied().ok_or_else(|| Error::dim("features need a batch axis"))?;
    let per = last.len() / n;
    let mut degenerate = 0;
    let mut values = Vec::with_capacity(features.len());
    for f in features {
        if f.shape() != last.shape() {
            return Err(Error::dim(format!("feature shapes {:?} and {:?} differ", f.shape(), last.shape())));
        }
        let mut acc = 0.0;
        for s in 0..n {
            let (a, b) = (&f.data()[s * per..(s + 1) * per], &last.data()[s * per..(s + 1) * per]);
            acc += cosine(a.iter().copied(), b.iter().copied()).unwrap_or_else(|| {
                degenerate += 1;
                0.0
            });
        }
        values.push(acc / n as f64);
    }
    Ok(FeatureSimilarity { values, degenerate })
}

/// Trailing moving average: entry `i` averages `values[i+1-window ..= i]`,
/// clipped at the start.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub vector_threshold: f64,
    pub block_threshold: f64,
    pub unique_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { vector_threshold: 0.5, block_threshold: 0.8, unique_threshold: 0.9 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        check_threshold("vector_threshold", self.vector_threshold)?;
        check_threshold("block_threshold", self.block_threshold)?;
        check_threshold("unique_threshold", self.unique_threshold)
    }
}

/// Every collapse diagnostic for one forward pass. Ratios are computed per
/// sample and averaged over the batch before any thresholding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub num_blocks: usize,
    pub num_samples: usize,
    /// `S(b, b+1)` for `b = 0 .. B-2`.
    pub adjacent_ratios: Vec<f64>,
    /// Mean column cosine over heads and tokens for each adjacent pair.
    pub adjacent_mean_cosine: Vec<f64>,
    pub similar_block_count: usize,
    /// `None` with fewer than two blocks.
    pub last_unique_block: Option<UniqueBlock>,
    /// Per block, mean off-diagonal cross-head ratio; `None` for single-head blocks.
    pub cross_head_ratios: Vec<Option<f64>>,
    pub feature_similarities: Vec<f64>,
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_average_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacent_ratios_smoothed: Option<Vec<f64>>,
    /// Zero-norm columns or features replaced by 0.
    pub degenerate_entries: usize,
}

impl SimilarityReport {
    pub fn similar_block_ratio(&self) -> f64 {
        if self.num_blocks == 0 {
            0.0
        } else {
            self.similar_block_count as f64 / self.num_blocks as f64
        }
    }

    pub fn mean_adjacent_ratio(&self) -> f64 {
        mean(&self.adjacent_ratios)
    }

    pub fn mean_adjacent_cosine(&self) -> f64 {
        mean(&self.adjacent_mean_cosine)
    }

    /// The report plus caller-supplied metadata as one JSON object.
    pub fn to_json(&self, meta: serde_json::Value) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        v["meta"] = meta;
        Ok(v)
    }

    /// One row per block: `block, adj_ratio, feature_sim, cross_head_mean`.
    /// `adj_ratio` of block `b` is `S(b-1, b)`, empty for block 0.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["block", "adj_ratio", "feature_sim", "cross_head_mean"]).map_err(io)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for b in 0..self.num_blocks {
            let adj = if b == 0 { None } else { self.adjacent_ratios.get(b - 1).copied() };
            out.write_record([
                b.to_string(),
                fmt(adj),
                fmt(self.feature_similarities.get(b).copied()),
                fmt(self.cross_head_ratios.get(b).copied().flatten()),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Builds the full report from a forward trace.
pub fn similarity_report(trace: &ForwardTrace, thresholds: Thresholds, window: Option<usize>) -> Result<SimilarityReport> {
    thresholds.validate()?;
    let n = trace.batch_size();
    let blocks = trace.num_blocks();
    let samples: Vec<Vec<AttentionMap>> = (0..n).map(|s| trace.maps_for(s)).collect::<Result<_>>()?;
    let mut degenerate_entries = 0;

    let pairs = blocks.saturating_sub(1);
    let mut adjacent_ratios = vec![0.0; pairs];
    let mut adjacent_mean_cosine = vec![0.0; pairs];
    for maps in &samples {
        for b in 0..pairs {
            let m = cross_layer_similarity(&maps[b], &maps[b + 1], (b, b + 1))?;
            degenerate_entries += m.degenerate_entries;
            adjacent_ratios[b] += ratio_above(m.values.data(), thresholds.vector_threshold) / n as f64;
            adjacent_mean_cosine[b] += m.mean() / n as f64;
        }
    }
    let similar_block_count = count_from_ratios(&adjacent_ratios, thresholds.block_threshold);
    let last_unique_block = (blocks >= 2).then(|| last_unique_from_ratios(&adjacent_ratios, thresholds.unique_threshold));

    let mut cross_head_ratios = Vec::with_capacity(blocks);
    for b in 0..blocks {
        if samples.first().is_none_or(|m| m[b].heads() < 2) {
            cross_head_ratios.push(None);
            continue;
        }
        let mut acc = 0.0;
        for maps in &samples {
            acc += cross_head_similarity(&maps[b], thresholds.vector_threshold)?.mean;
        }
        cross_head_ratios.push(Some(acc / n as f64));
    }

    let feature_similarities = if blocks == 0 {
        Vec::new()
    } else {
        let f = feature_similarity(&trace.block_features)?;
        degenerate_entries += f.degenerate;
        f.values
    };

    Ok(SimilarityReport {
        num_blocks: blocks,
        num_samples: n,
        adjacent_ratios_smoothed: window.map(|w| moving_average(&adjacent_ratios, w)),
        moving_average_window: window,
        adjacent_ratios,
        adjacent_mean_cosine,
        similar_block_count,
        last_unique_block,
        cross_head_ratios,
        feature_similarities,
        thresholds,
        degenerate_entries,
    })
}
