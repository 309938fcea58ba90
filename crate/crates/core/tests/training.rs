//! Optimizer, training loop and checkpoint behaviour on a tiny model.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlrm_core::error::Error;
use xlrm_core::model::{Ablation, ModelConfig};
use xlrm_core::nn::Params;
use xlrm_core::phantom::{rasterize_phantom, PhantomSpec};
use xlrm_core::selftest::{toy_geometry, toy_model_config};
use xlrm_core::trainer::{checkpoint, loss_and_grads, recon_loss, sample_points, TrainConfig, TrainSample, Trainer};

fn train_cfg() -> TrainConfig {
    TrainConfig {
        view_counts: vec![2, 3],
        lr_init: 1e-3,
        warmup_iters: 3,
        total_steps: 40,
        batch_size: 2,
        points_per_step: 64,
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|_| {
            let vol = rasterize_phantom(&PhantomSpec::random(&mut rng), 8).unwrap();
            TrainSample::render(vol, &toy_geometry(), None, &[2, 3]).unwrap()
        })
        .collect()
}

fn trainer(ab: Ablation) -> Trainer {
    Trainer::new(&toy_model_config(ab), train_cfg()).unwrap()
}

fn params(t: &Trainer) -> Vec<Vec<u32>> {
    t.model
        .named_params()
        .iter()
        .map(|(_, m)| m.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_zero_only_on_match(
        target in prop::collection::vec(0.0f64..1.0, 1..20),
        delta in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let pred: Vec<f64> = target.iter().zip(&delta).map(|(t, d)| t + d).collect();
        let l = recon_loss(&[&pred, &target], &target).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, pred == target);
        prop_assert_eq!(recon_loss(&[&target], &target).unwrap(), 0.0);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = data(2);
    let mut t = trainer(Ablation::Xformer);
    t.train_step(&d).unwrap();
    let before = params(&t);
    let (_, grads) = loss_and_grads(&t.model, &[(&d[0], &sample_points(&d[0].volume, 64, &mut ChaCha8Rng::seed_from_u64(1)))], &[2, 3]).unwrap();
    let mut model = t.model.clone();
    t.opt.update(&mut model, &grads, 0.0);
    t.model = model;
    assert_eq!(params(&t), before);
}

#[test]
fn every_parameter_group_receives_gradient() {
    let d = data(2);
    for ab in Ablation::ALL {
        let mut t = trainer(ab);
        // The output layer starts at zero; after one update gradients reach
        // everything upstream.
        t.train_step(&d).unwrap();
        let batch = sample_points(&d[0].volume, 256, &mut ChaCha8Rng::seed_from_u64(2));
        let (loss, grads) = loss_and_grads(&t.model, &[(&d[0], &batch)], &[2, 3]).unwrap();
        assert!(loss > 0.0);
        let mut groups = std::collections::BTreeMap::<String, f64>::new();
        for (name, g) in grads.named_params() {
            let group = name.split('.').next().unwrap().to_string();
            *groups.entry(group).or_default() += g.sum_sq();
        }
        let expected: &[&str] = match ab {
            Ablation::Base => &["grid_head", "encoder", "tokenizer"],
            _ => &["decoder", "deconv", "encoder", "field", "tokenizer"],
        };
        for g in expected {
            assert!(groups.get(*g).copied().unwrap_or(0.0) > 0.0, "{ab}: no gradient reaches {g}");
        }
        // The triplane embedding is a decoder parameter of its own.
        if ab != Ablation::Base {
            let emb: f64 = grads
                .named_params()
                .iter()
                .filter(|(n, _)| n.contains("embedding"))
                .map(|(_, g)| g.sum_sq())
                .sum();
            assert!(emb > 0.0, "{ab}: triplane embedding has no gradient");
        }
    }
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let d = data(3);
    let run = || {
        let mut t = trainer(Ablation::Xformer);
        let stats = t.run(&d, 10, None).unwrap();
        (stats.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(), params(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let d = data(2);
    let mut t = trainer(Ablation::Xformer);
    t.run(&d, 3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save(&path).unwrap();
    let loaded = Trainer::load(&path).unwrap();
    assert_eq!(params(&loaded), params(&t));
    assert_eq!(loaded.opt, t.opt);
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn resumed_training_follows_the_same_trajectory() {
    let d = data(3);
    let mut straight = trainer(Ablation::Xformer);
    let full = straight.run(&d, 20, None).unwrap();
    let mut first = trainer(Ablation::Xformer);
    first.run(&d, 10, None).unwrap();
    let mut resumed = Trainer::from_bytes(&first.to_bytes().unwrap(), "mem".as_ref()).unwrap();
    let rest = resumed.run(&d, 20, None).unwrap();
    let a: Vec<u64> = full[10..].iter().map(|s| s.loss.to_bits()).collect();
    let b: Vec<u64> = rest.iter().map(|s| s.loss.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(params(&resumed), params(&straight));
}

#[test]
fn mismatched_shape_names_the_tensor() {
    let t = trainer(Ablation::Xformer);
    let bytes = t.to_bytes().unwrap();
    let (mut manifest, payload) = checkpoint::decode(&bytes, "x".as_ref()).unwrap();
    let e = manifest.tensors.iter_mut().find(|e| e.name == "field.layers.1.weight").unwrap();
    e.shape = [e.shape[1], e.shape[0] - 1];
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut forged = Vec::new();
    forged.extend_from_slice(checkpoint::MAGIC);
    forged.extend_from_slice(&checkpoint::VERSION.to_le_bytes());
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    forged.extend_from_slice(payload);
    match Trainer::from_bytes(&forged, "x".as_ref()) {
        Err(Error::Checkpoint { entry, .. }) => assert_eq!(entry, "field.layers.1.weight"),
        other => panic!("expected a checkpoint error, got {:?}", other.err()),
    }
}

#[test]
fn corrupt_manifests_are_rejected_with_the_entry_name() {
    let t = trainer(Ablation::Xformer);
    let bytes = t.to_bytes().unwrap();
    let (mut manifest, payload) = checkpoint::decode(&bytes, "x".as_ref()).unwrap();
    manifest.tensors[3].offset = payload.len() as u64;
    let name = manifest.tensors[3].name.clone();
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut forged = bytes[..12].to_vec();
    forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
    forged.extend_from_slice(&json);
    forged.extend_from_slice(payload);
    match checkpoint::decode(&forged, "x".as_ref()) {
        Err(Error::Checkpoint { entry, .. }) => assert_eq!(entry, name),
        other => panic!("expected a checkpoint error, got {:?}", other.err()),
    }

    let mut garbled = bytes.clone();
    garbled[20] = b'#';
    assert!(matches!(
        checkpoint::decode(&garbled, "x".as_ref()),
        Err(Error::Checkpoint { entry, .. }) if entry == "manifest"
    ));
    assert!(matches!(Trainer::from_bytes(&bytes[..10], "x".as_ref()), Err(Error::Format { .. })));
}

#[test]
fn all_variants_train_on_the_same_data_and_log_lines() {
    let d = data(2);
    for ab in Ablation::ALL {
        let mut t = trainer(ab);
        let mut log = Vec::new();
        let stats = t.run(&d, 2, Some(&mut log)).unwrap();
        assert_eq!(stats.len(), 2);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(", ").count(), 4);
        assert!(lines[1].starts_with("2, "));
    }
}

#[test]
fn zero_output_layer_gives_the_half_plateau_at_step_zero() {
    let d = data(1);
    let t = trainer(Ablation::Xformer);
    let batch = sample_points(&d[0].volume, 128, &mut ChaCha8Rng::seed_from_u64(4));
    let (loss, _) = loss_and_grads(&t.model, &[(&d[0], &batch)], &[2, 3]).unwrap();
    let want = batch.targets.iter().map(|t| (0.5 - t) * (0.5 - t)).sum::<f64>() / batch.targets.len() as f64;
    assert!((loss - want).abs() < 1e-6);
}

#[test]
fn configs_round_trip_through_json() {
    let m = ModelConfig::desk();
    let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}
