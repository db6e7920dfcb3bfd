//! ViT / DeepViT classifiers assembled from a [`ModelConfig`].
//!
//! Parameters live in a [`ParamStore`] under dotted names
//! (`blocks.3.attn.theta`, `head.weight`, ...). Each parameter is initialised
//! from its own ChaCha stream keyed by `(seed, name)`, so two configs that
//! share a parameter name and shape start from identical values.

mod checkpoint;
mod config;
mod count;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    self, AttentionMap, AttentionVariant, HeadMixMatrix, Linear, MapNorm, MapNormStats, MaskSource, NormMode,
    QkvWeights, TemperatureArg, TemperatureSetting,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Precision, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_FORMAT};
pub use config::{parse_split, split_variants, ModelConfig};
pub use count::{block_params, count_params, param_breakdown, ParamBreakdown};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const MAP_NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running map-norm statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;
const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    query: Option<LinearIds>,
    key: Option<LinearIds>,
    value: LinearIds,
    proj: LinearIds,
    theta: Option<ParamId>,
    map_norm: Option<(ParamId, ParamId)>,
    log_tau: Option<ParamId>,
    norm2: (ParamId, ParamId),
    fc1: LinearIds,
    fc2: LinearIds,
}

/// Evaluation statistics of one block's map batch norm, per head.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Forward-pass mode. Training draws drop-attention masks from the given
/// generator and normalises maps with batch statistics.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[N, num_classes]`
    pub logits: Var,
    /// Per block, `[N, T, D]` after the block.
    pub features: Vec<Var>,
    /// Per block, the raw `[N, H, T, T]` map. Shared blocks repeat their anchor's handle.
    pub maps: Vec<Var>,
    /// Batch statistics of training-mode map norms, per block.
    pub norm_stats: Vec<Option<MapNormStats>>,
}

/// Concrete values of a forward pass, detached from the tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[N, num_classes]`
    pub logits: Tensor,
    /// Per block, `[N, T, D]`.
    pub block_features: Vec<Tensor>,
    /// Per block, raw `[N, H, T, T]` maps. Blocks that reuse a map hold the same `Arc`.
    pub block_maps: Vec<Arc<Tensor>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn num_blocks(&self) -> usize {
        self.block_maps.len()
    }

    /// Per-block maps of sample `n`.
    pub fn maps_for(&self, n: usize) -> Result<Vec<AttentionMap>> {
        self.block_maps.iter().map(|m| AttentionMap::new(m.index_first(n))).collect()
    }

    /// Per-block `[T, D]` features of sample `n`.
    pub fn features_for(&self, n: usize) -> Vec<Tensor> {
        self.block_features.iter().map(|f| f.index_first(n)).collect()
    }

    /// Index of the largest logit per sample; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

/// Row-wise argmax of a `[N, C]` tensor, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    patch: LinearIds,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockIds>,
    norm: (ParamId, ParamId),
    head: LinearIds,
    running: Vec<Option<RunningStats>>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Generator dedicated to parameter `name` under `seed`.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

struct Builder {
    seed: u64,
    store: ParamStore,
}

impl Builder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let wname = format!("{name}.weight");
        let mut rng = param_rng(self.seed, &wname);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-limit..limit));
        let weight = self.store.add(wname, w, true);
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false);
        LinearIds { weight, bias }
    }

    fn affine(&mut self, name: &str, n: usize) -> (ParamId, ParamId) {
        let g = self.store.add(format!("{name}.weight"), Tensor::ones(&[n]), false);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[n]), false);
        (g, b)
    }

    fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = param_rng(self.seed, name);
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
        self.store.add(name, t, false)
    }

    fn theta(&mut self, name: &str, heads: usize) -> ParamId {
        let mut rng = param_rng(self.seed, name);
        self.store.add(name, HeadMixMatrix::init(heads, &mut rng).into_tensor(), false)
    }
}

/// Builds and initialises a model; fails with a configuration error naming
/// the violated invariant.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.embed_dim;
    let h = config.num_heads;
    let mut b = Builder { seed, store: ParamStore::new() };
    let patch = b.linear("patch_embed", config.patch_dim(), d);
    let cls_token = b.gaussian("cls_token", &[d], EMBED_INIT_STD);
    let pos_embed = b.gaussian("pos_embed", &[config.tokens(), d], EMBED_INIT_STD);
    let mut blocks = Vec::with_capacity(config.num_blocks);
    let mut running = Vec::with_capacity(config.num_blocks);
    for (i, variant) in config.block_variants.iter().enumerate() {
        let p = format!("blocks.{i}");
        let norm1 = b.affine(&format!("{p}.norm1"), d);
        let shared = matches!(variant, AttentionVariant::Shared { .. });
        let query = (!shared).then(|| b.linear(&format!("{p}.attn.query"), d, d));
        let key = (!shared).then(|| b.linear(&format!("{p}.attn.key"), d, d));
        let value = b.linear(&format!("{p}.attn.value"), d, d);
        let proj = b.linear(&format!("{p}.attn.proj"), d, d);
        let theta = variant.has_theta().then(|| b.theta(&format!("{p}.attn.theta"), h));
        let norm_mode = variant.norm_mode();
        let map_norm = match norm_mode {
            Some(NormMode::Batch) | Some(NormMode::PerSample) => Some(b.affine(&format!("{p}.attn.map_norm"), h)),
            _ => None,
        };
        running.push(
            (norm_mode == Some(NormMode::Batch)).then(|| RunningStats { mean: vec![0.0; h], var: vec![1.0; h] }),
        );
        let log_tau = matches!(variant, AttentionVariant::Temperature { temperature: TemperatureSetting::Learnable })
            .then(|| b.store.add(format!("{p}.attn.log_tau"), Tensor::scalar(0.0), false));
        let norm2 = b.affine(&format!("{p}.norm2"), d);
        let fc1 = b.linear(&format!("{p}.mlp.fc1"), d, config.mlp_hidden);
        let fc2 = b.linear(&format!("{p}.mlp.fc2"), config.mlp_hidden, d);
        blocks.push(BlockIds { norm1, query, key, value, proj, theta, map_norm, log_tau, norm2, fc1, fc2 });
    }
    let norm = b.affine("norm", d);
    let head = b.linear("head", d, config.num_classes);
    Ok(Model { config: config.clone(), seed, params: b.store, patch, cls_token, pos_embed, blocks, norm, head, running })
}

/// Splits `[N, C, S, S]` images into `[N, P, C·p·p]` flattened patches,
/// patches in row-major grid order, each flattened channel-major.
pub fn patchify(images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    let (c, size, p) = (config.in_channels, config.image_size, config.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != size || s[3] != size {
        return Err(Error::dim(format!("images {s:?} do not match [N, {c}, {size}, {size}]")));
    }
    let (n, g) = (s[0], config.grid());
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; n * g * g * pd];
    for b in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                let base = ((b * g + gy) * g + gx) * pd;
                let mut k = 0;
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((b * c + ch) * size + gy * p + dy) * size + gx * p;
                        out[base + k..base + k + p].copy_from_slice(&src[row..row + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, g * g, pd], out)
}

fn bind_linear(vars: &[Var], ids: LinearIds) -> Linear {
    Linear { weight: vars[ids.weight.0], bias: vars[ids.bias.0] }
}

fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    let (z, _, _) = tape.standardize(x, &[axis], LAYER_NORM_EPS)?;
    let y = tape.mul(z, gamma)?;
    tape.add(y, beta)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.find(name).map(|id| self.params.get(id))
    }

    /// Overwrites the named parameter.
    pub fn set_param(&mut self, name: &str, values: &Tensor) -> Result<()> {
        let id = self.params.find(name).ok_or_else(|| Error::param(format!("no parameter named {name}")))?;
        self.params.assign(id, values)
    }

    pub fn running_stats(&self, block: usize) -> Option<&RunningStats> {
        self.running.get(block).and_then(|r| r.as_ref())
    }

    /// Non-learnable state as `(name, tensor)` pairs, in block order.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (b, r) in self.running.iter().enumerate() {
            if let Some(r) = r {
                let h = r.mean.len();
                out.push((format!("blocks.{b}.attn.map_norm.running_mean"), Tensor::from_parts(vec![h], r.mean.clone())));
                out.push((format!("blocks.{b}.attn.map_norm.running_var"), Tensor::from_parts(vec![h], r.var.clone())));
            }
        }
        out
    }

    pub(crate) fn set_buffers(&mut self, buffers: &HashMap<String, Tensor>) -> Result<()> {
        for (b, r) in self.running.iter_mut().enumerate() {
            if let Some(r) = r {
                for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                    let name = format!("blocks.{b}.attn.map_norm.{suffix}");
                    let t = buffers.get(&name).ok_or_else(|| Error::Manifest(format!("missing buffer {name}")))?;
                    if t.len() != dst.len() {
                        return Err(Error::Manifest(format!("buffer {name} has {} entries, expected {}", t.len(), dst.len())));
                    }
                    dst.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }

    /// Folds training-mode batch statistics into the running estimates,
    /// using the unbiased variance.
    pub fn update_running_stats(&mut self, stats: &[Option<MapNormStats>]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            if let (Some(r), Some(s)) = (r.as_mut(), s.as_ref()) {
                let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
                for h in 0..r.mean.len() {
                    r.mean[h] = (1.0 - RUNNING_MOMENTUM) * r.mean[h] + RUNNING_MOMENTUM * s.mean[h];
                    r.var[h] = (1.0 - RUNNING_MOMENTUM) * r.var[h] + RUNNING_MOMENTUM * s.var[h] * unbias;
                }
            }
        }
    }

    /// Patch projection, class token and positional embeddings: `[N, T, D]`.
    pub fn embed(&self, tape: &mut Tape, params: &[Var], images: &Tensor) -> Result<Var> {
        let d = self.config.embed_dim;
        let patches = patchify(images, &self.config)?;
        let n = patches.shape()[0];
        let patches = tape.constant(&patches);
        let tokens = bind_linear(params, self.patch).forward(tape, patches)?;
        let cls = tape.reshape(params[self.cls_token.0], &[1, 1, d])?;
        let cls = tape.broadcast_to(cls, &[n, 1, d])?;
        let x = tape.concat(&[cls, tokens], 1)?;
        tape.add(x, params[self.pos_embed.0])
    }

    /// Forward pass with parameters bound from the model's own store.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, mode: Mode<'_>) -> Result<ForwardVars> {
        let vars = tape.bind(&self.params);
        self.forward_with(tape, &vars, images, mode)
    }

    /// Forward pass with parameter handles supplied by the caller, indexed
    /// like the model's `ParamStore`.
    pub fn forward_with(&self, tape: &mut Tape, params: &[Var], images: &Tensor, mut mode: Mode<'_>) -> Result<ForwardVars> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!("{} parameter handles for {} parameters", params.len(), self.params.len())));
        }
        if images.shape().first() == Some(&0) || images.is_empty() {
            return Err(Error::dim("empty batch"));
        }
        let cfg = &self.config;
        let (d, heads) = (cfg.embed_dim, cfg.num_heads);
        let n = images.shape()[0];
        let mut x = self.embed(tape, params, images)?;

        let mut features = Vec::with_capacity(self.blocks.len());
        let mut maps: Vec<Var> = Vec::with_capacity(self.blocks.len());
        let mut norm_stats = Vec::with_capacity(self.blocks.len());
        let train = matches!(mode, Mode::Train(_));
        for (b, ids) in self.blocks.iter().enumerate() {
            let variant = cfg.block_variants[b];
            let h = layer_norm(tape, x, params[ids.norm1.0.0], params[ids.norm1.1.0])?;
            let value = bind_linear(params, ids.value);
            let map_norm = || -> MapNorm {
                match (variant.norm_mode(), ids.map_norm) {
                    (Some(NormMode::Batch), Some((g, bt))) => MapNorm::Batch {
                        gamma: params[g.0],
                        beta: params[bt.0],
                        eps: MAP_NORM_EPS,
                        running: if train {
                            None
                        } else {
                            self.running[b].as_ref().map(|r| (r.mean.clone(), r.var.clone()))
                        },
                    },
                    (Some(NormMode::PerSample), Some((g, bt))) => {
                        MapNorm::PerSample { gamma: params[g.0], beta: params[bt.0], eps: MAP_NORM_EPS }
                    }
                    _ => MapNorm::Identity,
                }
            };
            let (merged, map, stats) = if let AttentionVariant::Shared { .. } = variant {
                let anchor = cfg.shared_from.ok_or_else(|| Error::config("shared block without shared_from"))?;
                let shared = maps[anchor];
                let theta = params[ids.theta.expect("shared blocks own theta").0];
                let (out, _, stats) = attention::shared_attention(tape, h, shared, theta, &value, heads, &map_norm())?;
                (out, shared, stats)
            } else {
                let qkv = QkvWeights {
                    query: bind_linear(params, ids.query.expect("unshared blocks own a query map")),
                    key: bind_linear(params, ids.key.expect("unshared blocks own a key map")),
                    value,
                };
                let (q, k, v) = attention::qkv_project(tape, h, &qkv, heads)?;
                match variant {
                    AttentionVariant::Vanilla => {
                        let (o, m) = attention::mhsa(tape, q, k, v, TemperatureArg::Fixed(1.0))?;
                        (o, m, None)
                    }
                    AttentionVariant::Temperature { temperature } => {
                        let arg = match temperature.resolve(b, cfg.num_blocks) {
                            Some(t) => TemperatureArg::Fixed(t),
                            None => TemperatureArg::LogLearnable(params[ids.log_tau.expect("learnable τ").0]),
                        };
                        let (o, m) = attention::mhsa(tape, q, k, v, arg)?;
                        (o, m, None)
                    }
                    AttentionVariant::DropAttention { drop_rate } => {
                        let (o, m) = match &mut mode {
                            Mode::Train(rng) => {
                                attention::drop_attention(tape, q, k, v, drop_rate, MaskSource::Seeded(rng), true)?
                            }
                            Mode::Eval => {
                                let mut unused = ChaCha8Rng::seed_from_u64(0);
                                attention::drop_attention(tape, q, k, v, drop_rate, MaskSource::Seeded(&mut unused), false)?
                            }
                        };
                        (o, m, None)
                    }
                    AttentionVariant::ReAttention { .. } => {
                        let theta = params[ids.theta.expect("re-attention blocks own theta").0];
                        let r = attention::re_attention(tape, q, k, v, theta, &map_norm())?;
                        (r.out, r.raw_map, r.norm_stats)
                    }
                    AttentionVariant::Shared { .. } => unreachable!(),
                }
            };
            let a = bind_linear(params, ids.proj).forward(tape, merged)?;
            x = tape.add(x, a)?;
            let h2 = layer_norm(tape, x, params[ids.norm2.0.0], params[ids.norm2.1.0])?;
            let m = bind_linear(params, ids.fc1).forward(tape, h2)?;
            let m = tape.gelu(m);
            let m = bind_linear(params, ids.fc2).forward(tape, m)?;
            x = tape.add(x, m)?;
            tape.value(x).check_finite(&format!("block {b}"))?;
            features.push(x);
            maps.push(map);
            norm_stats.push(stats);
        }
        let y = layer_norm(tape, x, params[self.norm.0.0], params[self.norm.1.0])?;
        let cls_out = tape.narrow(y, 1, 0, 1)?;
        let cls_out = tape.reshape(cls_out, &[n, d])?;
        let logits = bind_linear(params, self.head).forward(tape, cls_out)?;
        tape.value(logits).check_finite("classifier head")?;
        Ok(ForwardVars { logits, features, maps, norm_stats })
    }

    /// Detaches the values of a forward pass. Blocks whose map handle is the
    /// same share one `Arc`.
    pub fn trace(tape: &Tape, vars: &ForwardVars) -> ForwardTrace {
        let mut seen: HashMap<Var, Arc<Tensor>> = HashMap::new();
        let block_maps = vars
            .maps
            .iter()
            .map(|&m| seen.entry(m).or_insert_with(|| Arc::new(tape.value(m).clone())).clone())
            .collect();
        ForwardTrace {
            logits: tape.value(vars.logits).clone(),
            block_features: vars.features.iter().map(|&f| tape.value(f).clone()).collect(),
            block_maps,
        }
    }

    /// Evaluation-mode forward pass returning concrete values.
    pub fn infer(&self, images: &Tensor, precision: Precision) -> Result<ForwardTrace> {
        let mut tape = Tape::new(precision);
        let vars = self.forward(&mut tape, images, Mode::Eval)?;
        Ok(Self::trace(&tape, &vars))
    }
}

#[cfg(test)]
mod tests;
