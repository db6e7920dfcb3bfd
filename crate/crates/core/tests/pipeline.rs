use reattn_core::attention::{AttentionVariant, NormMode};
use reattn_core::diagnostics::{similarity_report, Thresholds};
use reattn_core::model::{build_model, load_checkpoint, ModelConfig};
use reattn_core::numerics::Precision;
use reattn_core::training::{evaluate, synthetic, train, SyntheticConfig, TrainConfig};

fn config() -> ModelConfig {
    ModelConfig {
        name: Some("pipeline".into()),
        image_size: 8,
        patch_size: 4,
        in_channels: 3,
        num_classes: 3,
        num_blocks: 4,
        embed_dim: 16,
        num_heads: 4,
        mlp_hidden: 32,
        block_variants: vec![
            AttentionVariant::Vanilla,
            AttentionVariant::re_attention(),
            AttentionVariant::ReAttention { norm_mode: NormMode::PerSample },
            AttentionVariant::DropAttention { drop_rate: 0.2 },
        ],
        shared_from: None,
    }
}

#[test]
fn trained_checkpoint_reloads_to_the_same_model() {
    let data = synthetic(&SyntheticConfig { num_samples: 64, image_size: 8, channels: 3, num_classes: 3, noise: 0.1, seed: 1 })
        .unwrap();
    let (train_set, eval_set) = (data.head(48), data.head(16));
    let tc = TrainConfig { batch_size: 16, warmup_epochs: 1, probe_size: 8, reg_blocks: Some(1), checkpoint_every: Some(1), ..TrainConfig::new(3) };
    let tmp = tempfile::tempdir().unwrap();
    let mut model = build_model(&config(), 5).unwrap();
    let log = train(&mut model, &train_set, &eval_set, &tc, Some(tmp.path())).unwrap();
    assert_eq!(log.records.len(), 3);
    assert!(log.records.iter().all(|r| r.train_loss.is_finite()));

    let (loaded, manifest) = load_checkpoint(&tmp.path().join("checkpoints/epoch_003")).unwrap();
    assert_eq!(manifest.seed, 5);
    for (a, b) in model.params().iter().zip(loaded.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let before = model.infer(eval_set.images(), Precision::Double).unwrap();
    let after = loaded.infer(eval_set.images(), Precision::Double).unwrap();
    assert_eq!(before.logits.data(), after.logits.data());

    let ra = similarity_report(&before, Thresholds::default(), None).unwrap();
    let rb = similarity_report(&after, Thresholds::default(), None).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.adjacent_ratios.len(), 3);
    assert_eq!(
        evaluate(&model, &eval_set, 5, Precision::Double).unwrap(),
        evaluate(&loaded, &eval_set, 16, Precision::Double).unwrap()
    );
}
