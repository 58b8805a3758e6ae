//! Training-engine tests: optimizer semantics, deterministic scheduling,
//! checkpoint round-trips, resume equivalence, and gradient verification.

use ndarray::{ArrayD, IxDyn};
use obiformer_core::data::synthetic_dataset;
use obiformer_core::model::{build_model, ModelConfig};
use obiformer_core::train::{
    decays, epoch_order, epoch_transform, gradient_check, load_checkpoint, parameter_group,
    save_checkpoint, write_train_log, AdamW, GradCheckOptions, LrSchedule, StepRecord,
    TrainConfig, Trainer,
};
use obiformer_core::{Error, LossWeights, NoiseKind};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder_depth: 1,
        base_channels: 4,
        ..ModelConfig::default()
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        seed,
        weights: LossWeights {
            a1: 1.0,
            a2: 0.0,
            a3: 1.0,
            a4: 0.0,
        },
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------
// Optimizer behavior
// ---------------------------------------------------------------------

#[test]
fn decay_applies_to_kernels_only() {
    let store = build_model(&tiny_model(), 3).unwrap();
    let mut kernels = 0usize;
    let mut exempt = 0usize;
    for (name, _) in store.iter_params() {
        if decays(name) {
            assert!(name.ends_with(".weight"), "{name} should not decay");
            kernels += 1;
        } else {
            assert!(
                name.ends_with(".bias")
                    || name.ends_with(".gamma")
                    || name.ends_with(".beta")
                    || name.ends_with(".temperature"),
                "unexpected exempt parameter {name}"
            );
            exempt += 1;
        }
    }
    assert!(kernels > 0 && exempt > 0);
}

#[test]
fn zero_gradients_move_only_decayed_weights() {
    let cfg = tiny_model();
    let mut store = build_model(&cfg, 5).unwrap();
    let reference = build_model(&cfg, 5).unwrap();
    let zero_grads: Vec<(String, ArrayD<f32>)> = store
        .iter_params()
        .map(|(name, value)| (name.to_string(), ArrayD::zeros(value.raw_dim())))
        .collect();
    let mut opt = AdamW::new(0.5);
    opt.step(&mut store, &zero_grads, 0.1).unwrap();
    for (name, value) in store.iter_params() {
        let before = reference.param(name).unwrap();
        if decays(name) {
            // w <- w - lr * wd * w = 0.95 w, elementwise.
            for (a, b) in value.iter().zip(before.iter()) {
                assert!(
                    (*a - 0.95 * *b).abs() <= 1e-6 * b.abs().max(1.0),
                    "{name}: {a} vs {}",
                    0.95 * b
                );
            }
        } else {
            assert_eq!(value, before, "{name} moved without a gradient");
        }
    }
}

#[test]
fn optimizer_steps_descend_a_quadratic() {
    // Single parameter named like a kernel, loss = w^2 summed; AdamW with
    // no decay should monotonically shrink the parameter toward zero.
    let mut store = build_model(&tiny_model(), 7).unwrap();
    let name = "input_proj.weight";
    let start: f32 = store.param(name).unwrap().iter().map(|v| v * v).sum();
    let mut opt = AdamW::new(0.0);
    for _ in 0..50 {
        let grad = store.param(name).unwrap().mapv(|v| 2.0 * v);
        opt.step(&mut store, &[(name.to_string(), grad)], 1e-2).unwrap();
    }
    let end: f32 = store.param(name).unwrap().iter().map(|v| v * v).sum();
    assert!(end < start * 0.5, "no descent: {start} -> {end}");
}

#[test]
fn optimizer_rejects_bad_steps() {
    let cfg = tiny_model();
    let mut store = build_model(&cfg, 1).unwrap();
    let mut opt = AdamW::new(0.0);
    let err = opt.step(&mut store, &[], f64::NAN).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let bad_shape = vec![(
        "input_proj.weight".to_string(),
        ArrayD::<f32>::zeros(IxDyn(&[2, 2])),
    )];
    let err = opt.step(&mut store, &bad_shape, 1e-3).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn moment_round_trip_restores_the_optimizer() {
    let cfg = tiny_model();
    let mut store = build_model(&cfg, 9).unwrap();
    let mut opt = AdamW::new(0.01);
    for step in 0..3 {
        let grads: Vec<(String, ArrayD<f32>)> = store
            .iter_params()
            .map(|(name, value)| {
                (
                    name.to_string(),
                    value.mapv(|v| (v * (step as f32 + 1.0)).sin()),
                )
            })
            .collect();
        opt.step(&mut store, &grads, 1e-3).unwrap();
    }
    let mut first = indexmap::IndexMap::new();
    let mut second = indexmap::IndexMap::new();
    for (name, m, v) in opt.moments() {
        first.insert(name.to_string(), m.clone());
        second.insert(name.to_string(), v.clone());
    }
    let mut restored = AdamW::new(0.01);
    restored.restore_moments(first, second, 3).unwrap();

    // One more identical step on clones must produce identical weights.
    let grads: Vec<(String, ArrayD<f32>)> = store
        .iter_params()
        .map(|(name, value)| (name.to_string(), value.mapv(f32::cos)))
        .collect();
    let mut store_b = store.clone();
    opt.step(&mut store, &grads, 1e-3).unwrap();
    restored.step(&mut store_b, &grads, 1e-3).unwrap();
    for (name, value) in store.iter_params() {
        assert_eq!(value, store_b.param(name).unwrap(), "{name} diverged");
    }
}

// ---------------------------------------------------------------------
// Deterministic scheduling
// ---------------------------------------------------------------------

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let order = epoch_order(10, 42, 0);
    let mut sorted = order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(order, epoch_order(10, 42, 0), "not reproducible");
    assert_ne!(order, epoch_order(10, 42, 1), "epochs should differ");
    assert_ne!(order, epoch_order(10, 43, 0), "seeds should differ");
    assert!(epoch_order(0, 1, 2).is_empty());
}

#[test]
fn augmentation_schedule_is_a_pure_function() {
    for epoch in 0..4 {
        for index in 0..6 {
            let a = epoch_transform(7, epoch, index);
            let b = epoch_transform(7, epoch, index);
            assert_eq!(a, b);
        }
    }
    // Different samples in one epoch should not all share one transform.
    let distinct: std::collections::BTreeSet<_> = (0..64)
        .map(|i| format!("{:?}", epoch_transform(7, 0, i)))
        .collect();
    assert!(distinct.len() > 1);
}

// ---------------------------------------------------------------------
// Training loop determinism and divergence handling
// ---------------------------------------------------------------------

fn smoke_records() -> Vec<obiformer_core::SampleRecord> {
    synthetic_dataset(4, 16, 16, NoiseKind::Mixed, 0.5, 99).unwrap()
}

fn losses(steps: &[StepRecord]) -> Vec<f64> {
    steps.iter().map(|s| s.loss).collect()
}

#[test]
fn identical_seeds_give_identical_loss_traces() {
    let records = smoke_records();
    let mut a = Trainer::new(tiny_model(), tiny_train(11)).unwrap();
    let mut b = Trainer::new(tiny_model(), tiny_train(11)).unwrap();
    let steps_a = a.run(&records, None).unwrap();
    let steps_b = b.run(&records, None).unwrap();
    assert_eq!(losses(&steps_a), losses(&steps_b));
    assert!(!steps_a.is_empty());
    for (name, value) in a.store.iter_params() {
        assert_eq!(value, b.store.param(name).unwrap(), "{name} diverged");
    }
    let mut c = Trainer::new(tiny_model(), tiny_train(12)).unwrap();
    let steps_c = c.run(&records, None).unwrap();
    assert_ne!(
        losses(&steps_a),
        losses(&steps_c),
        "different seeds should shuffle differently"
    );
}

#[test]
fn training_on_an_empty_split_is_rejected() {
    let mut records = smoke_records();
    for r in &mut records {
        r.split = obiformer_core::data::Split::Test;
    }
    let mut t = Trainer::new(tiny_model(), tiny_train(1)).unwrap();
    let err = t.run_epoch(&records, None).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn divergence_is_reported_with_the_step_number() {
    let records = smoke_records();
    let mut cfg = tiny_train(3);
    cfg.learning_rate = 1e30; // guaranteed to blow up within an epoch
    let mut t = Trainer::new(tiny_model(), cfg).unwrap();
    let mut failed = None;
    for _ in 0..40 {
        match t.run_epoch(&records, None) {
            Ok(_) => continue,
            Err(e) => {
                failed = Some(e);
                break;
            }
        }
    }
    let err = failed.expect("a 1e30 learning rate should diverge");
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(err.to_string().contains("step"), "{err}");
}

// ---------------------------------------------------------------------
// Batch normalization statistics
// ---------------------------------------------------------------------

#[test]
fn training_moves_running_statistics() {
    let records = smoke_records();
    let mut t = Trainer::new(tiny_model(), tiny_train(21)).unwrap();
    let before: Vec<(String, ArrayD<f32>)> = t
        .store
        .iter_buffers()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    assert!(!before.is_empty(), "expected running statistics buffers");
    t.run_epoch(&records, None).unwrap();
    let mut moved = 0usize;
    for (name, old) in &before {
        if t.store.buffer(name).unwrap() != old {
            moved += 1;
        }
    }
    assert!(moved > 0, "no running statistic was updated");
}

// ---------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let records = smoke_records();
    let mut t = Trainer::new(tiny_model(), tiny_train(31)).unwrap();
    t.run_epoch(&records, None).unwrap();
    save_checkpoint(&path, &t).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.epochs_done, t.epochs_done);
    assert_eq!(loaded.global_step, t.global_step);
    for (name, value) in t.store.iter_params() {
        assert_eq!(value, loaded.store.param(name).unwrap(), "param {name}");
    }
    for (name, value) in t.store.iter_buffers() {
        assert_eq!(value, loaded.store.buffer(name).unwrap(), "buffer {name}");
    }
}

#[test]
fn resuming_is_equivalent_to_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");
    let records = smoke_records();
    let mut config = tiny_train(41);
    config.epochs = 4;

    let mut straight = Trainer::new(tiny_model(), config.clone()).unwrap();
    let full_trace = straight.run(&records, None).unwrap();

    let mut first_half = Trainer::new(tiny_model(), config).unwrap();
    let mut trace_a = Vec::new();
    trace_a.extend(first_half.run_epoch(&records, None).unwrap());
    trace_a.extend(first_half.run_epoch(&records, None).unwrap());
    save_checkpoint(&path, &first_half).unwrap();
    drop(first_half);

    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed.epochs_done, 2);
    let mut trace_b = trace_a;
    trace_b.extend(resumed.run(&records, None).unwrap());

    assert_eq!(losses(&full_trace), losses(&trace_b), "loss traces differ");
    for (name, value) in straight.store.iter_params() {
        assert_eq!(value, resumed.store.param(name).unwrap(), "param {name}");
    }
    for (name, value) in straight.store.iter_buffers() {
        assert_eq!(value, resumed.store.buffer(name).unwrap(), "buffer {name}");
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let records = smoke_records();
    let mut t = Trainer::new(tiny_model(), tiny_train(51)).unwrap();
    t.run_epoch(&records, None).unwrap();

    let good = dir.path().join("good.ckpt");
    save_checkpoint(&good, &t).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    // Wrong magic.
    let wrong_magic = dir.path().join("magic.ckpt");
    let mut m = bytes.clone();
    m[..4].copy_from_slice(b"NOPE");
    std::fs::write(&wrong_magic, &m).unwrap();
    let err = load_checkpoint(&wrong_magic).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");

    // Truncation.
    let truncated = dir.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&truncated).is_err());

    // Missing file.
    let missing = dir.path().join("absent.ckpt");
    let err = load_checkpoint(&missing).unwrap_err();
    assert!(err.to_string().contains("absent.ckpt"), "{err}");
}

// ---------------------------------------------------------------------
// Configuration and logging
// ---------------------------------------------------------------------

#[test]
fn train_config_round_trips_through_key_values() {
    let mut config = tiny_train(61);
    config.bn_momentum = 0.05;
    config.augment = false;
    let text = config.to_kv();
    let parsed = TrainConfig::from_kv(&text).unwrap();
    assert_eq!(parsed.epochs, config.epochs);
    assert_eq!(parsed.batch_size, config.batch_size);
    assert_eq!(parsed.learning_rate, config.learning_rate);
    assert_eq!(parsed.weight_decay, config.weight_decay);
    assert_eq!(parsed.seed, config.seed);
    assert_eq!(parsed.bn_momentum, config.bn_momentum);
    assert_eq!(parsed.augment, config.augment);
    assert_eq!(parsed.weights.a1, config.weights.a1);
    assert_eq!(parsed.weights.a2, config.weights.a2);

    assert!(TrainConfig::from_kv("epochs = banana").is_err());
    let ignored = TrainConfig::from_kv("unknown_key = 3\n").unwrap();
    assert_eq!(ignored.epochs, TrainConfig::default().epochs);
}

#[test]
fn train_logs_are_written_as_commented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let steps = vec![
        StepRecord {
            step: 1,
            epoch: 0,
            loss: -12.5,
            lr: 2e-4,
            wall_ms: 3.0,
        },
        StepRecord {
            step: 2,
            epoch: 0,
            loss: -13.0,
            lr: 2e-4,
            wall_ms: 2.5,
        },
    ];
    write_train_log(&path, &tiny_train(1).to_kv(), &steps).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with('#'));
    assert!(text.contains("step,epoch,loss,lr,wall_ms"));
    assert!(text.contains("\n1,0,"));
    assert!(text.contains("\n2,0,"));
}

// ---------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------

#[test]
fn every_parameter_is_classified_into_a_named_group() {
    let store = build_model(&ModelConfig::default(), 0).unwrap();
    let mut groups = std::collections::BTreeSet::new();
    for (name, _) in store.iter_params() {
        let g = parameter_group(name);
        assert_ne!(g, "other", "unclassified parameter {name}");
        groups.insert(g);
    }
    for expected in [
        "io-heads",
        "resampling",
        "fusion-gate",
        "glyph-convs",
        "norm-affines",
        "gated-ffn",
        "attention-temperature",
        "attention-projections",
    ] {
        assert!(groups.contains(expected), "no parameters in {expected}");
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    // Reduced probe budget keeps this suite quick; the acceptance test
    // runs the full-budget check.
    let opts = GradCheckOptions {
        height: 16,
        width: 16,
        min_scalars: 48,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(&tiny_model(), &opts).unwrap();
    assert!(report.scalars >= 48, "only {} scalars probed", report.scalars);
    assert_eq!(report.groups.len(), 8, "expected eight parameter groups");
    assert!(
        report.passed(),
        "gradient check failed:\n{report}"
    );
}

// ---------------------------------------------------------------------
// Learning-rate schedules, clipping, and validation cadence
// ---------------------------------------------------------------------

#[test]
fn cosine_schedule_halves_at_midpoint_and_decays() {
    let config = TrainConfig {
        epochs: 10,
        learning_rate: 4e-3,
        lr_schedule: LrSchedule::Cosine,
        ..tiny_train(0)
    };
    assert_eq!(config.lr_for_epoch(0), 4e-3);
    assert!((config.lr_for_epoch(5) - 2e-3).abs() < 1e-15);
    for e in 1..10 {
        assert!(
            config.lr_for_epoch(e) < config.lr_for_epoch(e - 1),
            "cosine schedule must decrease monotonically"
        );
        assert!(config.lr_for_epoch(e) > 0.0);
    }

    let constant = TrainConfig {
        lr_schedule: LrSchedule::Constant,
        ..config
    };
    for e in 0..10 {
        assert_eq!(constant.lr_for_epoch(e), 4e-3);
    }
}

#[test]
fn scheduled_rates_appear_in_step_records() {
    let records = smoke_records();
    let config = TrainConfig {
        lr_schedule: LrSchedule::Cosine,
        ..tiny_train(5)
    };
    let mut t = Trainer::new(tiny_model(), config.clone()).unwrap();
    let steps = t.run(&records, None).unwrap();
    for s in &steps {
        assert_eq!(s.lr, config.lr_for_epoch(s.epoch));
    }
    assert!(steps.iter().any(|s| s.epoch == 1));
}

#[test]
fn generous_clip_is_inert_and_tight_clip_rescales() {
    let records = smoke_records();
    let unclipped = {
        let mut t = Trainer::new(tiny_model(), tiny_train(21)).unwrap();
        t.run(&records, None).unwrap()
    };
    // A bound far above any real gradient norm must not disturb the run.
    let generous = {
        let config = TrainConfig {
            clip_norm: Some(1e12),
            ..tiny_train(21)
        };
        let mut t = Trainer::new(tiny_model(), config).unwrap();
        t.run(&records, None).unwrap()
    };
    assert_eq!(losses(&unclipped), losses(&generous));

    // A tiny bound rescales gradients, so later steps land elsewhere.
    let tight = {
        let config = TrainConfig {
            clip_norm: Some(1e-3),
            ..tiny_train(21)
        };
        let mut t = Trainer::new(tiny_model(), config).unwrap();
        t.run(&records, None).unwrap()
    };
    assert_eq!(tight[0].loss, unclipped[0].loss, "loss precedes the update");
    assert_ne!(losses(&tight)[1..], losses(&unclipped)[1..]);
    assert!(tight.iter().all(|s| s.loss.is_finite()));
}

#[test]
fn clip_norm_must_be_positive() {
    for bad in [0.0, -1.0, f64::NAN] {
        let config = TrainConfig {
            clip_norm: Some(bad),
            ..tiny_train(0)
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn validation_runs_at_the_configured_cadence() {
    use obiformer_core::data::Split;
    let mut records = smoke_records();
    records[3].split = Split::Val;
    let config = TrainConfig {
        epochs: 4,
        validation_every: 2,
        ..tiny_train(31)
    };
    let mut t = Trainer::new(tiny_model(), config).unwrap();
    t.run(&records, None).unwrap();
    let epochs: Vec<usize> = t.val_records.iter().map(|v| v.epoch).collect();
    assert_eq!(epochs, vec![2, 4]);
    for v in &t.val_records {
        assert!(v.psnr_db.is_finite());
        assert!((0.0..=1.0).contains(&v.ssim));
    }
    let best = t.best_validation().unwrap();
    assert!(t.val_records.iter().all(|v| v.psnr_db <= best.psnr_db));
}

#[test]
fn validation_without_a_val_split_is_skipped() {
    let records = smoke_records();
    let config = TrainConfig {
        validation_every: 1,
        ..tiny_train(32)
    };
    let mut t = Trainer::new(tiny_model(), config).unwrap();
    t.run(&records, None).unwrap();
    assert!(t.val_records.is_empty());
    assert!(t.best_validation().is_none());
}

#[test]
fn validation_history_rides_checkpoints() {
    use obiformer_core::data::Split;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.ckpt");
    let mut records = smoke_records();
    records[0].split = Split::Val;
    let config = TrainConfig {
        epochs: 2,
        validation_every: 1,
        ..tiny_train(33)
    };
    let mut t = Trainer::new(tiny_model(), config).unwrap();
    t.run(&records, None).unwrap();
    assert_eq!(t.val_records.len(), 2);
    save_checkpoint(&path, &t).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored.val_records, t.val_records);
    assert_eq!(
        restored.best_validation().unwrap(),
        t.best_validation().unwrap()
    );
}

#[test]
fn validation_logs_are_written_as_csv() {
    use obiformer_core::train::{write_val_log, ValRecord};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.csv");
    let records = vec![
        ValRecord { epoch: 1, psnr_db: 18.25, ssim: 0.5 },
        ValRecord { epoch: 2, psnr_db: 19.5, ssim: 0.625 },
    ];
    write_val_log(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,psnr_db,ssim");
    assert_eq!(lines[1], "1,18.25,0.5");
    assert_eq!(lines.len(), 3);
}

#[test]
fn extended_fields_round_trip_through_key_values() {
    let config = TrainConfig {
        lr_schedule: LrSchedule::Cosine,
        clip_norm: Some(2.5),
        validation_every: 7,
        checkpoint_every: 3,
        ..tiny_train(44)
    };
    let parsed = TrainConfig::from_kv(&config.to_kv()).unwrap();
    assert_eq!(parsed, config);

    let none = TrainConfig {
        clip_norm: None,
        ..config
    };
    let parsed = TrainConfig::from_kv(&none.to_kv()).unwrap();
    assert_eq!(parsed.clip_norm, None);

    assert!(TrainConfig::from_kv("lr_schedule = sawtooth\n").is_err());
    assert!(TrainConfig::from_kv("clip_norm = banana\n").is_err());
}
