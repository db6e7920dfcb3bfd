use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{AttentionVariant, NormMode, TemperatureSetting};

fn tiny(num_blocks: usize, variant: AttentionVariant) -> ModelConfig {
    ModelConfig {
        name: None,
        image_size: 8,
        patch_size: 4,
        in_channels: 3,
        num_classes: 3,
        num_blocks,
        embed_dim: 8,
        num_heads: 2,
        mlp_hidden: 12,
        block_variants: vec![variant; num_blocks],
        shared_from: None,
    }
}

fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, cfg.in_channels, cfg.image_size, cfg.image_size], |_| rng.gen_range(0.0..1.0))
}

fn within(count: usize, millions: f64, tol: f64) -> bool {
    let c = count as f64 / 1e6;
    (c - millions).abs() / millions <= tol
}

// ---- parameter counts ------------------------------------------------------

#[test]
fn table_two_depths_within_two_percent() {
    for (blocks, reference) in [(16, 24.46), (24, 36.26), (32, 48.09)] {
        let c = count_params(&ModelConfig::vit(blocks, 384, 12));
        assert!(within(c, reference, 0.02), "{blocks} blocks: {c} vs {reference}M");
    }
    let c = count_params(&ModelConfig::vit(12, 384, 12));
    assert!(within(c, 18.51, 0.02), "{c}");
}

#[test]
fn closed_form_matches_built_store() {
    let variants = [
        AttentionVariant::Vanilla,
        AttentionVariant::re_attention(),
        AttentionVariant::ReAttention { norm_mode: NormMode::Identity },
        AttentionVariant::ReAttention { norm_mode: NormMode::PerSample },
        AttentionVariant::Temperature { temperature: TemperatureSetting::Learnable },
        AttentionVariant::Temperature { temperature: TemperatureSetting::default_decay() },
        AttentionVariant::DropAttention { drop_rate: 0.1 },
    ];
    for v in variants {
        let cfg = tiny(3, v);
        assert_eq!(build_model(&cfg, 0).unwrap().num_params(), count_params(&cfg), "{v:?}");
    }
    let cfg = tiny(4, AttentionVariant::Vanilla).with_sharing(1, NormMode::Batch);
    assert_eq!(build_model(&cfg, 0).unwrap().num_params(), count_params(&cfg));
}

#[test]
fn empty_stack_is_stem_plus_head() {
    let cfg = ModelConfig::vit(0, 384, 12);
    let (d, t, c) = (384, 197, 1000);
    let expected = 3 * 16 * 16 * d + d + d + t * d + 2 * d + d * c + c;
    assert_eq!(count_params(&cfg), expected);
    assert_eq!(build_model(&tiny(0, AttentionVariant::Vanilla), 1).unwrap().num_params(), count_params(&tiny(0, AttentionVariant::Vanilla)));
}

#[test]
fn doubling_width_roughly_quadruples_blocks() {
    let blocks = |d: usize| param_breakdown(&ModelConfig::vit(12, d, 8)).blocks as f64;
    let r = blocks(512) / blocks(256);
    assert!((3.8..=4.2).contains(&r), "{r}");
}

#[test]
fn re_attention_overhead_is_theta_plus_norm_affine() {
    for heads in [2, 4, 12] {
        let mut cfg = ModelConfig::vit(4, 384, heads);
        let vanilla = count_params(&cfg);
        cfg.block_variants[3] = AttentionVariant::re_attention();
        cfg.block_variants[1] = AttentionVariant::re_attention();
        assert_eq!(count_params(&cfg) - vanilla, 2 * (heads * heads + 2 * heads));
    }
}

// ---- configuration ---------------------------------------------------------

#[test]
fn invalid_configs_name_the_invariant() {
    let cases: Vec<(ModelConfig, &str)> = vec![
        (ModelConfig { image_size: 10, ..tiny(1, AttentionVariant::Vanilla) }, "patch_size"),
        (ModelConfig { num_heads: 3, ..tiny(1, AttentionVariant::Vanilla) }, "num_heads"),
        (ModelConfig { num_blocks: 2, ..tiny(1, AttentionVariant::Vanilla) }, "block_variants"),
        (ModelConfig { shared_from: Some(1), ..tiny(2, AttentionVariant::Vanilla) }, "shared_from"),
        (tiny(2, AttentionVariant::shared()), "shared_from is unset"),
        (tiny(1, AttentionVariant::DropAttention { drop_rate: 1.5 }), "drop_rate"),
    ];
    for (cfg, needle) in cases {
        match build_model(&cfg, 0) {
            Err(Error::Configuration(m)) => assert!(m.contains(needle), "{m} lacks {needle}"),
            other => panic!("expected configuration error for {needle}, got {other:?}"),
        }
    }
}

#[test]
fn split_and_uniform_variant_forms() {
    let base = r#""image_size":8,"patch_size":4,"num_classes":3,"num_blocks":16,"embed_dim":8,"num_heads":2,"mlp_hidden":12"#;
    let cfg: ModelConfig = serde_json::from_str(&format!(r#"{{{base},"block_variants":"11-5"}}"#)).unwrap();
    assert_eq!(cfg.block_variants[10], AttentionVariant::Vanilla);
    assert_eq!(cfg.block_variants[11], AttentionVariant::re_attention());
    assert_eq!(cfg.block_variants.iter().filter(|v| v.has_theta()).count(), 5);
    assert_eq!(cfg.in_channels, 3);
    let cfg2: ModelConfig =
        serde_json::from_str(&format!(r#"{{{base},"block_variants":{{"kind":"re_attention"}}}}"#)).unwrap();
    assert!(cfg2.block_variants.iter().all(|v| v.has_theta()));
    assert!(serde_json::from_str::<ModelConfig>(&format!(r#"{{{base},"block_variants":"11-4"}}"#)).is_err());
    assert!(serde_json::from_str::<ModelConfig>(&format!(r#"{{{base},"block_variants":"x-5"}}"#)).is_err());
    assert!(serde_json::from_str::<ModelConfig>(&format!(r#"{{{base},"block_variants":"0-16","depth":3}}"#)).is_err());
    let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

// ---- embedding -------------------------------------------------------------

#[test]
fn token_counts_follow_grid() {
    assert_eq!(ModelConfig::vit(1, 384, 12).tokens(), 197);
    let cfg = ModelConfig { image_size: 32, patch_size: 8, ..tiny(1, AttentionVariant::Vanilla) };
    assert_eq!(cfg.tokens(), 17);
    let model = build_model(&cfg, 3).unwrap();
    let trace = model.infer(&images(2, &cfg, 0), Precision::Double).unwrap();
    assert_eq!(trace.block_features[0].shape(), &[2, 17, 8]);
    assert_eq!(trace.block_maps[0].shape(), &[2, 2, 17, 17]);
}

#[test]
fn zero_image_embeds_to_class_token_and_zeros() {
    let cfg = tiny(1, AttentionVariant::Vanilla);
    let mut model = build_model(&cfg, 4).unwrap();
    model.set_param("pos_embed", &Tensor::zeros(&[cfg.tokens(), 8])).unwrap();
    let mut tape = Tape::new(Precision::Double);
    let vars = tape.bind(model.params());
    let x = model.embed(&mut tape, &vars, &Tensor::zeros(&[1, 3, 8, 8])).unwrap();
    let x = tape.value(x);
    let cls = model.param("cls_token").unwrap();
    assert_eq!(&x.data()[..8], cls.data());
    assert!(x.data()[8..].iter().all(|&v| v == 0.0));
}

#[test]
fn patchify_is_channel_major_within_row_major_patches() {
    let cfg = ModelConfig { in_channels: 2, ..tiny(1, AttentionVariant::Vanilla) };
    let img = Tensor::from_fn(&[1, 2, 8, 8], |i| i as f64);
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[1, 4, 32]);
    // patch 1 is grid row 0, column 1; its first entry is channel 0, pixel (0, 4)
    assert_eq!(p.get(&[0, 1, 0]), 4.0);
    assert_eq!(p.get(&[0, 1, 4]), 12.0);
    assert_eq!(p.get(&[0, 2, 16]), 64.0 + 32.0);
    assert!(matches!(patchify(&Tensor::zeros(&[1, 3, 8, 8]), &cfg), Err(Error::Dimension(_))));
}

// ---- hand-unrolled reference forward ---------------------------------------

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let w = mat(w);
    x.iter()
        .map(|row| (0..w[0].len()).map(|o| b.data()[o] + row.iter().zip(&w).map(|(xi, wr)| xi * wr[o]).sum::<f64>()).collect())
        .collect()
}

fn ln(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-6).sqrt() * g.data()[i] + b.data()[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn oracle_logits(model: &Model, img: &Tensor) -> Vec<f64> {
    let cfg = model.config();
    let p = |n: &str| model.param(n).unwrap().clone();
    let (d, heads, g, ps) = (cfg.embed_dim, cfg.num_heads, cfg.grid(), cfg.patch_size);
    let dh = d / heads;
    // patches by direct pixel indexing
    let mut patches: Mat = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::new();
            for c in 0..cfg.in_channels {
                for dy in 0..ps {
                    for dx in 0..ps {
                        v.push(img.get(&[0, c, gy * ps + dy, gx * ps + dx]));
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut x: Mat = vec![p("cls_token").data().to_vec()];
    x.extend(affine(&patches, &p("patch_embed.weight"), &p("patch_embed.bias")));
    let pos = mat(&p("pos_embed"));
    for (row, pr) in x.iter_mut().zip(&pos) {
        row.iter_mut().zip(pr).for_each(|(a, b)| *a += b);
    }
    let t = x.len();
    for (b, variant) in cfg.block_variants.iter().enumerate() {
        let pre = format!("blocks.{b}");
        let w = |s: &str| p(&format!("{pre}.{s}"));
        let h = ln(&x, &w("norm1.weight"), &w("norm1.bias"));
        let q = affine(&h, &w("attn.query.weight"), &w("attn.query.bias"));
        let k = affine(&h, &w("attn.key.weight"), &w("attn.key.bias"));
        let v = affine(&h, &w("attn.value.weight"), &w("attn.value.bias"));
        let mut maps = vec![vec![vec![0.0; t]; t]; heads];
        for hd in 0..heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| q[i][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..t {
                    maps[hd][i][j] = (logits[j] - m).exp() / z;
                }
            }
        }
        if variant.has_theta() {
            let th = w("attn.theta");
            let mut mixed = vec![vec![vec![0.0; t]; t]; heads];
            for hp in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        mixed[hp][i][j] = (0..heads).map(|hd| th.get(&[hd, hp]) * maps[hd][i][j]).sum();
                    }
                }
            }
            // evaluation batch norm from running statistics
            let rs = model.running_stats(b).unwrap();
            let (gm, bt) = (w("attn.map_norm.weight"), w("attn.map_norm.bias"));
            for hp in 0..heads {
                for row in mixed[hp].iter_mut() {
                    for e in row.iter_mut() {
                        *e = (*e - rs.mean[hp]) / (rs.var[hp] + 1e-5).sqrt() * gm.data()[hp] + bt.data()[hp];
                    }
                }
            }
            maps = mixed;
        }
        let mut attn: Mat = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            for i in 0..t {
                for c in 0..dh {
                    attn[i][hd * dh + c] = (0..t).map(|j| maps[hd][i][j] * v[j][hd * dh + c]).sum();
                }
            }
        }
        let a = affine(&attn, &w("attn.proj.weight"), &w("attn.proj.bias"));
        for (xr, ar) in x.iter_mut().zip(&a) {
            xr.iter_mut().zip(ar).for_each(|(u, v)| *u += v);
        }
        let h2 = ln(&x, &w("norm2.weight"), &w("norm2.bias"));
        let mut m = affine(&h2, &w("mlp.fc1.weight"), &w("mlp.fc1.bias"));
        m.iter_mut().flatten().for_each(|u| *u = gelu(*u));
        let m = affine(&m, &w("mlp.fc2.weight"), &w("mlp.fc2.bias"));
        for (xr, mr) in x.iter_mut().zip(&m) {
            xr.iter_mut().zip(mr).for_each(|(u, v)| *u += v);
        }
    }
    let y = ln(&x[..1].to_vec(), &p("norm.weight"), &p("norm.bias"));
    affine(&y, &p("head.weight"), &p("head.bias")).remove(0)
}

fn perturb(model: &mut Model, seed: u64) {
    // move norm affines and biases off their trivial init so the oracle sees them
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut().iter_mut() {
        if !p.decay {
            p.tensor.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
    }
}

#[test]
fn tiny_forward_matches_unrolled_oracle() {
    let mut cfg = tiny(2, AttentionVariant::Vanilla);
    cfg.block_variants[1] = AttentionVariant::re_attention();
    let mut model = build_model(&cfg, 7).unwrap();
    perturb(&mut model, 1);
    model.update_running_stats(&[
        None,
        Some(MapNormStats { mean: vec![0.1, 0.3], var: vec![0.5, 2.0], count: 9 }),
    ]);
    let img = images(1, &cfg, 2);
    let trace = model.infer(&img, Precision::Double).unwrap();
    let oracle = oracle_logits(&model, &img);
    for (a, b) in trace.logits.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

// ---- structural properties -------------------------------------------------

#[test]
fn vanilla_trace_maps_are_row_stochastic() {
    let cfg = tiny(3, AttentionVariant::Vanilla);
    let model = build_model(&cfg, 5).unwrap();
    let trace = model.infer(&images(3, &cfg, 1), Precision::Single).unwrap();
    assert_eq!(trace.num_blocks(), 3);
    for n in 0..3 {
        for m in trace.maps_for(n).unwrap() {
            assert!(m.is_row_stochastic(1e-5));
        }
    }
}

#[test]
fn shared_blocks_reference_the_anchor_map() {
    let cfg = tiny(4, AttentionVariant::Vanilla).with_sharing(1, NormMode::Batch);
    let model = build_model(&cfg, 6).unwrap();
    let trace = model.infer(&images(2, &cfg, 3), Precision::Double).unwrap();
    assert!(!Arc::ptr_eq(&trace.block_maps[0], &trace.block_maps[1]));
    for b in 2..4 {
        assert!(Arc::ptr_eq(&trace.block_maps[1], &trace.block_maps[b]));
    }
    assert!(model.param("blocks.2.attn.query.weight").is_none());
    assert!(model.param("blocks.2.attn.value.weight").is_some());
}

#[test]
fn identity_theta_model_matches_vanilla_of_same_seed() {
    let cfg_v = tiny(3, AttentionVariant::Vanilla);
    let cfg_r = tiny(3, AttentionVariant::ReAttention { norm_mode: NormMode::Identity });
    let vanilla = build_model(&cfg_v, 11).unwrap();
    let mut re = build_model(&cfg_r, 11).unwrap();
    for b in 0..3 {
        re.set_param(&format!("blocks.{b}.attn.theta"), &Tensor::eye(2)).unwrap();
    }
    let img = images(2, &cfg_v, 4);
    let a = vanilla.infer(&img, Precision::Double).unwrap();
    let b = re.infer(&img, Precision::Double).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    let a = vanilla.infer(&img, Precision::Single).unwrap();
    let b = re.infer(&img, Precision::Single).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits) <= 1e-5);
}

#[test]
fn zeroed_output_projections_make_blocks_identity() {
    let cfg = tiny(3, AttentionVariant::re_attention());
    let mut model = build_model(&cfg, 8).unwrap();
    for b in 0..3 {
        for name in ["attn.proj", "mlp.fc2"] {
            let w = format!("blocks.{b}.{name}.weight");
            let bias = format!("blocks.{b}.{name}.bias");
            let shape = model.param(&w).unwrap().shape().to_vec();
            model.set_param(&w, &Tensor::zeros(&shape)).unwrap();
            model.set_param(&bias, &Tensor::zeros(&[8])).unwrap();
        }
    }
    let img = images(2, &cfg, 5);
    let mut tape = Tape::new(Precision::Double);
    let vars = tape.bind(model.params());
    let x0 = model.embed(&mut tape, &vars, &img).unwrap();
    let x0 = tape.value(x0).clone();
    let trace = model.infer(&img, Precision::Double).unwrap();
    for f in &trace.block_features {
        assert_eq!(f.data(), x0.data());
    }
}

#[test]
fn nan_activation_names_its_block() {
    let cfg = tiny(3, AttentionVariant::Vanilla);
    let mut model = build_model(&cfg, 9).unwrap();
    let mut w = model.param("blocks.1.mlp.fc1.weight").unwrap().clone();
    w.data_mut()[0] = f64::NAN;
    model.set_param("blocks.1.mlp.fc1.weight", &w).unwrap();
    match model.infer(&images(1, &cfg, 6), Precision::Double) {
        Err(Error::Numerical { location, .. }) => assert_eq!(location, "block 1"),
        other => panic!("expected numerical failure, got {other:?}"),
    }
}

#[test]
fn eval_is_deterministic_and_train_masks_replay() {
    let cfg = tiny(2, AttentionVariant::DropAttention { drop_rate: 0.3 });
    let model = build_model(&cfg, 10).unwrap();
    let img = images(2, &cfg, 7);
    let a = model.infer(&img, Precision::Single).unwrap();
    let b = model.infer(&img, Precision::Single).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());

    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(Precision::Double);
        let v = model.forward(&mut tape, &img, Mode::Train(&mut rng)).unwrap();
        tape.value(v.logits).clone()
    };
    assert_eq!(run(1).data(), run(1).data());
    assert_ne!(run(1).data(), run(2).data());
    assert_ne!(run(1).data(), a.logits.data());
}

#[test]
fn same_names_share_initial_values_across_configs() {
    let a = build_model(&tiny(2, AttentionVariant::Vanilla), 3).unwrap();
    let b = build_model(&tiny(2, AttentionVariant::re_attention()), 3).unwrap();
    let c = build_model(&tiny(2, AttentionVariant::Vanilla), 4).unwrap();
    for name in ["blocks.1.attn.query.weight", "pos_embed", "head.weight"] {
        assert_eq!(a.param(name), b.param(name));
        assert_ne!(a.param(name), c.param(name));
    }
    let th = b.param("blocks.0.attn.theta").unwrap();
    assert!(th.max_abs_diff(&Tensor::eye(2)) < 0.06);
}

#[test]
fn running_stats_use_momentum_and_unbiased_variance() {
    let mut model = build_model(&tiny(1, AttentionVariant::re_attention()), 0).unwrap();
    model.update_running_stats(&[Some(MapNormStats { mean: vec![1.0, 2.0], var: vec![0.5, 0.5], count: 5 })]);
    let r = model.running_stats(0).unwrap();
    assert!((r.mean[0] - 0.1).abs() < 1e-15 && (r.mean[1] - 0.2).abs() < 1e-15);
    assert!((r.var[0] - (0.9 + 0.1 * 0.5 * 5.0 / 4.0)).abs() < 1e-15);
}

// ---- checkpoints -----------------------------------------------------------

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let mut cfg = tiny(3, AttentionVariant::re_attention());
    cfg.block_variants[0] = AttentionVariant::Temperature { temperature: TemperatureSetting::Learnable };
    let mut model = build_model(&cfg, 12).unwrap();
    perturb(&mut model, 3);
    model.update_running_stats(&[None, Some(MapNormStats { mean: vec![0.2, 0.1], var: vec![0.3, 0.4], count: 10 }), None]);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path(), serde_json::json!({"epoch": 2})).unwrap();
    let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.meta["epoch"], 2);
    assert_eq!(loaded.running_stats(1), model.running_stats(1));
    let img = images(2, &cfg, 8);
    assert_eq!(
        loaded.infer(&img, Precision::Double).unwrap().logits.data(),
        model.infer(&img, Precision::Double).unwrap().logits.data()
    );
}

#[test]
fn checkpoint_config_mismatch_is_manifest_error() {
    let model = build_model(&tiny(2, AttentionVariant::Vanilla), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path(), serde_json::Value::Null).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["config"]["mlp_hidden"] = 16.into();
    std::fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Manifest(_))));
}
