//! Finite-difference gradient suites over attention ops, whole models and losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use reattn_core::attention::{
    drop_attention, mhsa, qkv_project, re_attention, shared_attention, AttentionVariant, HeadMixMatrix, Linear, MapNorm,
    MaskSource, NormMode, QkvWeights, TemperatureArg, TemperatureSetting,
};
use reattn_core::model::{build_model, ModelConfig, Mode};
use reattn_core::numerics::{grad_check, Precision, Tape, Tensor, Var};
use reattn_core::training::{cross_entropy, similarity_regularized_loss};
use reattn_core::Result;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Attention,
    Model,
    Loss,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ w ⊙ x` with fixed random weights, so no output direction is special.
fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(tape.shape(x), -1.0, 1.0, &mut rng);
    let w = tape.constant(&w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn check<F>(suite: &'static str, name: &str, inputs: &[Tensor], f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = grad_check(f, inputs, STEP, TOLERANCE)?;
    Ok(CheckOutcome { suite, name: name.to_string(), max_rel_error: r.max_rel_error(), passed: r.passed() })
}

fn norm_for(mode: NormMode, gamma: Var, beta: Var) -> MapNorm {
    match mode {
        NormMode::Identity => MapNorm::Identity,
        NormMode::Batch => MapNorm::Batch { gamma, beta, eps: 1e-5, running: None },
        NormMode::PerSample => MapNorm::PerSample { gamma, beta, eps: 1e-5 },
    }
}

pub fn attention_suite() -> Result<Vec<CheckOutcome>> {
    const S: &str = "attention";
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (n, h, t, d) = (2, 2, 3, 2);
    let qkv = [uniform(&[n, h, t, d], -1.0, 1.0, &mut rng), uniform(&[n, h, t, d], -1.0, 1.0, &mut rng), uniform(&[n, h, t, d], -1.0, 1.0, &mut rng)];
    let theta = HeadMixMatrix::init(h, &mut rng).into_tensor();
    let gamma = uniform(&[h], 0.8, 1.2, &mut rng);
    let beta = uniform(&[h], -0.2, 0.2, &mut rng);
    let mut out = Vec::new();

    out.push(check(S, "mhsa", &qkv, |tp, x| {
        let (o, _) = mhsa(tp, x[0], x[1], x[2], TemperatureArg::Fixed(1.0))?;
        probe(tp, o, 1)
    })?);
    out.push(check(S, "temperature_fixed", &qkv, |tp, x| {
        let (o, _) = mhsa(tp, x[0], x[1], x[2], TemperatureArg::Fixed(0.6))?;
        probe(tp, o, 2)
    })?);
    let mut with_tau = qkv.to_vec();
    with_tau.push(Tensor::scalar(-0.4));
    out.push(check(S, "temperature_learnable", &with_tau, |tp, x| {
        let (o, _) = mhsa(tp, x[0], x[1], x[2], TemperatureArg::LogLearnable(x[3]))?;
        probe(tp, o, 3)
    })?);
    for mode in [NormMode::Identity, NormMode::Batch, NormMode::PerSample] {
        let mut inputs = qkv.to_vec();
        inputs.extend([theta.clone(), gamma.clone(), beta.clone()]);
        out.push(check(S, &format!("re_attention_{}", mode_name(mode)), &inputs, |tp, x| {
            let r = re_attention(tp, x[0], x[1], x[2], x[3], &norm_for(mode, x[4], x[5]))?;
            probe(tp, r.out, 4)
        })?);
    }
    let dim = h * d;
    let xs = uniform(&[n, t, dim], -1.0, 1.0, &mut rng);
    // any positive map works; use a softmax output so it looks like one
    let map = {
        let mut tp = Tape::new(Precision::Double);
        let logits = tp.constant(&uniform(&[n, h, t, t], -1.0, 1.0, &mut rng));
        let m = tp.softmax(logits, 3, 1.0)?;
        tp.value(m).clone()
    };
    let wv = uniform(&[dim, dim], -0.5, 0.5, &mut rng);
    let bv = uniform(&[dim], -0.1, 0.1, &mut rng);
    let shared_inputs = [xs.clone(), map, theta.clone(), wv.clone(), bv.clone(), gamma.clone(), beta.clone()];
    for mode in [NormMode::Batch, NormMode::Identity] {
        out.push(check(S, &format!("shared_attention_{}", mode_name(mode)), &shared_inputs, |tp, x| {
            let value = Linear { weight: x[3], bias: x[4] };
            let (o, _, _) = shared_attention(tp, x[0], x[1], x[2], &value, h, &norm_for(mode, x[5], x[6]))?;
            probe(tp, o, 5)
        })?);
    }
    let keep = Tensor::from_fn(&[n, h, t, t], |i| if i % 4 == 1 { 0.0 } else { 1.0 });
    out.push(check(S, "drop_attention", &qkv, |tp, x| {
        let (o, _) = drop_attention(tp, x[0], x[1], x[2], 0.25, MaskSource::Explicit(&keep), true)?;
        probe(tp, o, 6)
    })?);
    let key_bias = uniform(&[dim], -0.1, 0.1, &mut rng);
    let mut inputs = vec![xs];
    for _ in 0..3 {
        inputs.push(uniform(&[dim, dim], -0.5, 0.5, &mut rng));
    }
    inputs.push(uniform(&[dim], -0.1, 0.1, &mut rng));
    inputs.push(uniform(&[dim], -0.1, 0.1, &mut rng));
    // the key bias cannot change a softmax row, see `invariant`
    out.push(check(S, "qkv_projection", &inputs, |tp, x| {
        let kb = tp.constant(&key_bias);
        let w = QkvWeights {
            query: Linear { weight: x[1], bias: x[4] },
            key: Linear { weight: x[2], bias: kb },
            value: Linear { weight: x[3], bias: x[5] },
        };
        let (q, k, v) = qkv_project(tp, x[0], &w, h)?;
        let (o, _) = mhsa(tp, q, k, v, TemperatureArg::Fixed(1.0))?;
        probe(tp, o, 7)
    })?);
    Ok(out)
}

fn mode_name(mode: NormMode) -> &'static str {
    match mode {
        NormMode::Identity => "identity",
        NormMode::Batch => "batch",
        NormMode::PerSample => "per_sample",
    }
}

/// Two-block model small enough to perturb every parameter.
pub fn tiny_config(num_blocks: usize, variant: AttentionVariant) -> ModelConfig {
    ModelConfig {
        name: None,
        image_size: 4,
        patch_size: 2,
        in_channels: 2,
        num_classes: 3,
        num_blocks,
        embed_dim: 4,
        num_heads: 2,
        mlp_hidden: 6,
        block_variants: vec![variant; num_blocks],
        shared_from: None,
    }
}

/// Query/key biases shift every score in a softmax row equally, so the
/// key bias has an identically zero gradient. Perturbing it only measures
/// rounding noise against a 1e-8 floor; it enters as a constant instead and
/// gets its own vanishing-gradient check.
fn invariant(name: &str) -> bool {
    name.ends_with("attn.key.bias")
}

fn model_check(suite: &'static str, name: &str, cfg: &ModelConfig, lambda: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut model = build_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    // move off the initialisation, where zero norm biases make some
    // gradients vanish by coincidence
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for n in &names {
        let t = model.param(n).expect("listed parameter").clone();
        let jitter = uniform(t.shape(), -0.1, 0.1, &mut rng);
        let moved = Tensor::from_fn(t.shape(), |i| t.data()[i] + jitter.data()[i]);
        model.set_param(n, &moved)?;
    }
    let images = uniform(&[3, cfg.in_channels, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut rng);
    let labels = [0, 2, 1];
    let loss = |tp: &mut Tape, params: &[Var]| -> Result<Var> {
        let vars = model.forward_with(tp, params, &images, Mode::Eval)?;
        if lambda > 0.0 {
            similarity_regularized_loss(tp, vars.logits, &labels, &vars.maps, lambda, 0)
        } else {
            cross_entropy(tp, vars.logits, &labels)
        }
    };
    let all: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
    let free: Vec<Tensor> = all.iter().filter(|(n, _)| !invariant(n)).map(|(_, t)| (*t).clone()).collect();
    let mut out = vec![check(suite, name, &free, |tp, x| {
        let mut it = x.iter();
        let params: Vec<Var> =
            all.iter().map(|(n, t)| if invariant(n) { tp.constant(t) } else { *it.next().expect("one var per free param") }).collect();
        loss(tp, &params)
    })?];

    let mut tp = Tape::new(Precision::Double);
    let params: Vec<Var> = all.iter().map(|(_, t)| tp.variable(t)).collect();
    let l = loss(&mut tp, &params)?;
    tp.backward(l)?;
    let mut worst = 0.0f64;
    let mut any = false;
    for ((n, _), v) in all.iter().zip(&params) {
        if invariant(n) {
            any = true;
            let g = tp.grad(*v).expect("variables carry gradients");
            worst = g.data().iter().fold(worst, |m, x| m.max(x.abs()));
        }
    }
    if any {
        out.push(CheckOutcome {
            suite,
            name: format!("{name}_key_bias_gradient_vanishes"),
            max_rel_error: worst,
            passed: worst < 1e-12,
        });
    }
    Ok(out)
}

pub fn model_suite() -> Result<Vec<CheckOutcome>> {
    const S: &str = "model";
    let cases = [
        ("vanilla_model", tiny_config(2, AttentionVariant::Vanilla)),
        ("re_attention_model", tiny_config(2, AttentionVariant::re_attention())),
        ("per_sample_norm_model", tiny_config(2, AttentionVariant::ReAttention { norm_mode: NormMode::PerSample })),
        ("learnable_temperature_model", tiny_config(2, AttentionVariant::Temperature { temperature: TemperatureSetting::Learnable })),
        ("shared_model", tiny_config(3, AttentionVariant::Vanilla).with_sharing(0, NormMode::Batch)),
    ];
    let mut out = Vec::new();
    for (i, (name, cfg)) in cases.iter().enumerate() {
        out.extend(model_check(S, name, cfg, 0.0, 40 + i as u64)?);
    }
    Ok(out)
}

pub fn loss_suite() -> Result<Vec<CheckOutcome>> {
    const S: &str = "loss";
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let logits = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let mut out = vec![check(S, "cross_entropy", std::slice::from_ref(&logits), |tp, x| cross_entropy(tp, x[0], &[3, 0, 1]))?];
    let mut inputs = vec![logits];
    inputs.extend((0..4).map(|_| uniform(&[3, 2, 3, 3], 0.05, 1.0, &mut rng)));
    out.push(check(S, "regularized_loss", &inputs, |tp, x| {
        similarity_regularized_loss(tp, x[0], &[3, 0, 1], &x[1..], 0.5, 2)
    })?);
    out.extend(model_check(S, "regularized_model", &tiny_config(2, AttentionVariant::re_attention()), 0.5, 7)?);
    Ok(out)
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckOutcome>> {
    match suite {
        Suite::Attention => attention_suite(),
        Suite::Model => model_suite(),
        Suite::Loss => loss_suite(),
    }
}
