use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::NormMode;

/// Affine map bound to a tape: `x · weight + bias`, weight `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QkvWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// `[N, T, D]` to `[N, H, T, D/H]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("expected [N, T, D] tokens, got {s:?}")));
    }
    if heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(Error::config(format!("embedding dim {} not divisible by {heads} heads", s[2])));
    }
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[N, H, T, d]` to `[N, T, H·d]`, heads concatenated in order.
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("expected [N, H, T, d], got {s:?}")));
    }
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Three independent linear maps of `[N, T, D]` tokens, split into heads.
pub fn qkv_project(tape: &mut Tape, x: Var, w: &QkvWeights, heads: usize) -> Result<(Var, Var, Var)> {
    let d = *tape.shape(x).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!("embedding dim {d} not divisible by {heads} heads")));
    }
    let q = w.query.forward(tape, x)?;
    let k = w.key.forward(tape, x)?;
    let v = w.value.forward(tape, x)?;
    Ok((split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?))
}

/// Softmax temperature as a fixed value or a tape scalar holding `log τ`.
#[derive(Clone, Copy, Debug)]
pub enum TemperatureArg {
    Fixed(f64),
    LogLearnable(Var),
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Option<Var>) -> Result<()> {
    let sq = tape.shape(q);
    if sq.len() != 4 || tape.shape(k) != sq || v.is_some_and(|v| tape.shape(v) != sq) {
        return Err(Error::dim(format!(
            "Q/K/V must share one [N, H, T, d] shape, got {sq:?}, {:?}{}",
            tape.shape(k),
            v.map(|v| format!(", {:?}", tape.shape(v))).unwrap_or_default()
        )));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / (τ √d))` over the last axis: `[N, H, T, T]`.
pub fn attention_map(tape: &mut Tape, q: Var, k: Var, temperature: TemperatureArg) -> Result<Var> {
    check_qkv(tape, q, k, None)?;
    let d = tape.shape(q)[3];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    match temperature {
        TemperatureArg::Fixed(t) => tape.softmax(scores, 3, t),
        TemperatureArg::LogLearnable(log_tau) => {
            if tape.value(log_tau).len() != 1 {
                return Err(Error::dim("learnable temperature must be a scalar"));
            }
            let neg = tape.scale(log_tau, -1.0);
            let inv_tau = tape.exp(neg);
            let scaled = tape.mul(scores, inv_tau)?;
            tape.softmax(scaled, 3, 1.0)
        }
    }
}

/// `map · V`, heads merged back to `[N, T, D]`.
pub fn apply_map(tape: &mut Tape, map: Var, v: Var) -> Result<Var> {
    let ctx = tape.matmul(map, v)?;
    merge_heads(tape, ctx)
}

/// Multi-head self-attention. Returns the merged head outputs `[N, T, D]`
/// (before the output projection) and the attention map.
pub fn mhsa(tape: &mut Tape, q: Var, k: Var, v: Var, temperature: TemperatureArg) -> Result<(Var, Var)> {
    check_qkv(tape, q, k, Some(v))?;
    let map = attention_map(tape, q, k, temperature)?;
    let out = apply_map(tape, map, v)?;
    Ok((out, map))
}

/// `mixed[n, h', i, j] = Σ_h θ[h, h'] · map[n, h, i, j]`.
pub fn mix_heads(tape: &mut Tape, map: Var, theta: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    let st = tape.shape(theta).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("attention map must be [N, H, T, T], got {s:?}")));
    }
    if st != [s[1], s[1]] {
        return Err(Error::config(format!(
            "head-mixing matrix {st:?} does not match {} heads",
            s[1]
        )));
    }
    let flat = tape.reshape(map, &[s[0], s[1], s[2] * s[3]])?;
    let theta_t = tape.transpose(theta)?;
    let mixed = tape.matmul(theta_t, flat)?;
    tape.reshape(mixed, &s)
}

/// Normalisation of mixed maps, bound to a tape.
#[derive(Clone, Debug)]
pub enum MapNorm {
    Identity,
    /// Batch statistics in training; `running` (mean, var) per head in evaluation.
    Batch { gamma: Var, beta: Var, eps: f64, running: Option<(Vec<f64>, Vec<f64>)> },
    PerSample { gamma: Var, beta: Var, eps: f64 },
}

/// Per-head batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MapNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Entries per head that produced the statistics.
    pub count: usize,
}

impl MapNorm {
    pub fn mode(&self) -> NormMode {
        match self {
            MapNorm::Identity => NormMode::Identity,
            MapNorm::Batch { .. } => NormMode::Batch,
            MapNorm::PerSample { .. } => NormMode::PerSample,
        }
    }
}

fn per_head(tape: &mut Tape, v: Var, heads: usize) -> Result<Var> {
    if tape.shape(v) != [heads] {
        return Err(Error::config(format!("norm affine {:?} does not match {heads} heads", tape.shape(v))));
    }
    tape.reshape(v, &[1, heads, 1, 1])
}

/// Applies `norm` to a `[N, H, T, T]` map.
pub fn normalize_map(tape: &mut Tape, x: Var, norm: &MapNorm) -> Result<(Var, Option<MapNormStats>)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("attention map must be [N, H, T, T], got {s:?}")));
    }
    let heads = s[1];
    match norm {
        MapNorm::Identity => Ok((x, None)),
        MapNorm::Batch { gamma, beta, eps, running } => {
            let (z, stats) = match running {
                None => {
                    let (z, mean, var) = tape.standardize(x, &[0, 2, 3], *eps)?;
                    (z, Some(MapNormStats { mean, var, count: s[0] * s[2] * s[3] }))
                }
                Some((mean, var)) => {
                    if mean.len() != heads || var.len() != heads {
                        return Err(Error::config("running statistics do not match head count"));
                    }
                    let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, k)| -m * k).collect();
                    let scale = tape.constant(&Tensor::new(vec![1, heads, 1, 1], scale)?);
                    let shift = tape.constant(&Tensor::new(vec![1, heads, 1, 1], shift)?);
                    let z = tape.mul(x, scale)?;
                    (tape.add(z, shift)?, None)
                }
            };
            let g = per_head(tape, *gamma, heads)?;
            let b = per_head(tape, *beta, heads)?;
            let y = tape.mul(z, g)?;
            Ok((tape.add(y, b)?, stats))
        }
        MapNorm::PerSample { gamma, beta, eps } => {
            let (z, _, _) = tape.standardize(x, &[2, 3], *eps)?;
            let g = per_head(tape, *gamma, heads)?;
            let b = per_head(tape, *beta, heads)?;
            let y = tape.mul(z, g)?;
            Ok((tape.add(y, b)?, None))
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReAttentionOutput {
    /// Merged head outputs `[N, T, D]`, before the output projection.
    pub out: Var,
    /// Softmax map before mixing; the operand of the collapse diagnostics.
    pub raw_map: Var,
    /// Map after head mixing, before normalisation.
    pub mixed_map: Var,
    pub norm_stats: Option<MapNormStats>,
}

/// `Norm(θᵀ · softmax(Q Kᵀ / √d)) · V`.
pub fn re_attention(tape: &mut Tape, q: Var, k: Var, v: Var, theta: Var, norm: &MapNorm) -> Result<ReAttentionOutput> {
    check_qkv(tape, q, k, Some(v))?;
    let raw_map = attention_map(tape, q, k, TemperatureArg::Fixed(1.0))?;
    let mixed_map = mix_heads(tape, raw_map, theta)?;
    let (normed, norm_stats) = normalize_map(tape, mixed_map, norm)?;
    let out = apply_map(tape, normed, v)?;
    Ok(ReAttentionOutput { out, raw_map, mixed_map, norm_stats })
}

/// Where a drop-attention mask comes from.
pub enum MaskSource<'a> {
    /// Explicit keep-mask of 0/1 entries shaped like the map.
    Explicit(&'a Tensor),
    /// Bernoulli(1 − rate) keep-mask drawn from this generator.
    Seeded(&'a mut ChaCha8Rng),
}

/// Attention with dropout applied to the map entries. In training the map is
/// masked and rescaled by `1/(1 − rate)`; in evaluation it is used as is.
/// The returned map is the unmasked softmax output.
pub fn drop_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    drop_rate: f64,
    mask: MaskSource<'_>,
    train: bool,
) -> Result<(Var, Var)> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::param(format!("drop_rate {drop_rate} outside [0, 1)")));
    }
    check_qkv(tape, q, k, Some(v))?;
    let map = attention_map(tape, q, k, TemperatureArg::Fixed(1.0))?;
    let used = if train {
        let shape = tape.shape(map).to_vec();
        let keep = match mask {
            MaskSource::Explicit(m) => m.clone(),
            MaskSource::Seeded(rng) => {
                Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < drop_rate { 0.0 } else { 1.0 })
            }
        };
        tape.dropout(map, &keep, drop_rate)?
    } else {
        map
    };
    let out = apply_map(tape, used, v)?;
    Ok((out, map))
}

/// Reuse of an earlier block's map: `Norm(θᵀ · shared_map) · V` where `V`
/// comes from this block's input `x` through `value`. Returns the merged
/// head outputs `[N, T, D]` and the mixed map.
pub fn shared_attention(
    tape: &mut Tape,
    x: Var,
    shared_map: Var,
    theta: Var,
    value: &Linear,
    heads: usize,
    norm: &MapNorm,
) -> Result<(Var, Var, Option<MapNormStats>)> {
    let sx = tape.shape(x).to_vec();
    let sm = tape.shape(shared_map).to_vec();
    if sx.len() != 3 || sm.len() != 4 || sm[0] != sx[0] || sm[2] != sx[1] || sm[3] != sx[1] || sm[1] != heads {
        return Err(Error::dim(format!(
            "shared map {sm:?} does not fit input {sx:?} with {heads} heads"
        )));
    }
    let v = value.forward(tape, x)?;
    let v = split_heads(tape, v, heads)?;
    let mixed = mix_heads(tape, shared_map, theta)?;
    let (normed, stats) = normalize_map(tape, mixed, norm)?;
    let out = apply_map(tape, normed, v)?;
    Ok((out, mixed, stats))
}
