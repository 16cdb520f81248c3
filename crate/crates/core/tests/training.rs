//! Training loop, optimizer, grid search, checkpoints and cross-validation on
//! a downscaled fixture.

use std::collections::HashSet;
use std::path::Path;

use dualfer::data::{generate_fixture, load_dataset, AugmentPolicy, FixtureSpec, LoadOptions};
use dualfer::error::{CheckpointError, Error};
use dualfer::eval::run_cross_validation_on;
use dualfer::fusion::{build_model, HeadKind, ModelConfig};
use dualfer::train::grid::grid_search_with;
use dualfer::train::{
    accuracy, adam_update, initial_state, load_checkpoint, prepare_run, restore_model, save_checkpoint, select_best,
    train, train_step, AdamConfig, AdamState, Checkpoint, GridSpec, Protocol, TrainConfig,
};
use dualfer::Mode;

const SIZE: usize = 48;

fn fixture(dir: &Path, per_class: usize) {
    let spec = FixtureSpec {
        per_class,
        size: SIZE as u32,
        ..FixtureSpec::default()
    };
    generate_fixture(dir, &spec).unwrap();
}

fn small_config(data: &Path, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::kmu_fed();
    cfg.dataset_root = Some(data.to_path_buf());
    cfg.epochs = epochs;
    cfg.batch_size = 10;
    cfg.eval_every = 1;
    cfg.split.protocol = Protocol::None;
    cfg.augment = AugmentPolicy::default();
    cfg.model.shufflenet.input_size = SIZE;
    cfg.model.efficientvit.input_size = SIZE;
    cfg
}

#[test]
fn identical_runs_have_identical_losses() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 5);
    let cfg = small_config(dir.path(), 3);
    let (a, _) = train(&cfg, None).unwrap();
    let (b, _) = train(&cfg, None).unwrap();
    let losses = |h: &[dualfer::train::EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(a.history.len(), 3);
    assert_eq!(losses(&a.history), losses(&b.history));
    for ((na, ta), (nb, tb)) in a.model.params.named_tensors().iter().zip(b.model.params.named_tensors().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "{na}");
    }
    let mut other = cfg.clone();
    other.seed = 1;
    let (c, _) = train(&other, None).unwrap();
    assert_ne!(losses(&a.history), losses(&c.history));
}

#[test]
fn frozen_backbones_keep_their_weights() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let mut cfg = small_config(dir.path(), 2);
    cfg.freeze_backbones = true;
    let before = build_model::<f32>(&cfg.model_config(), cfg.seed).unwrap();
    let (after, _) = train(&cfg, None).unwrap();
    let mut changed_head = false;
    for (p, q) in before.params.params().iter().zip(after.model.params.params()) {
        assert_eq!(p.name, q.name);
        if p.name.starts_with("shufflenet.") || p.name.starts_with("efficientvit.") {
            assert!(!q.trainable);
            assert_eq!(p.tensor, q.tensor, "{} moved", p.name);
        } else {
            changed_head |= p.tensor != q.tensor;
        }
    }
    assert!(changed_head, "the classifier did not train");
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let mut cfg = small_config(dir.path(), 1);
    cfg.learning_rate = 1e-4;
    let run = prepare_run(&cfg).unwrap();
    let mut state = initial_state::<f32>(&cfg).unwrap();
    let batch = run.loader.batch(&run.train, None).unwrap();
    let first = train_step(&mut state.model, &mut state.optimizer, &batch.images, &batch.labels, &cfg, 5).unwrap();
    // the same dropout seed, so only the weights differ between the two losses
    let second = train_step(&mut state.model, &mut state.optimizer, &batch.images, &batch.labels, &cfg, 5).unwrap();
    assert!(second < first, "loss went from {first} to {second}");
}

/// Bias-corrected Adam written out for a scalar.
fn adam_oracle(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    p
}

#[test]
fn adam_matches_the_scalar_oracle() {
    let cfg = AdamConfig::default();
    let cases = [(0.5, [0.2, -0.1]), (-1.25, [3.0, 3.0]), (2.0, [1e-6, -4.0])];
    for (p0, grads) in cases {
        let (mut p, mut m, mut v) = ([p0], [0.0f64], [0.0f64]);
        for (t, g) in grads.iter().enumerate() {
            adam_update(&mut p, &[*g], &mut m, &mut v, t as u64 + 1, 1e-3, &cfg);
        }
        let want = adam_oracle(p0, &grads, 1e-3, 0.9, 0.999, 1e-8);
        assert!((p[0] - want).abs() <= 1e-12, "{} vs {want}", p[0]);
    }
    // hand-expanded first step: m_hat = g and v_hat = g^2, so p moves by lr * g / (|g| + eps)
    let (mut p, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
    adam_update(&mut p, &[0.2], &mut m, &mut v, 1, 1e-3, &cfg);
    assert!((p[0] - (0.5 - 1e-3 * 0.2 / (0.2 + 1e-8))).abs() <= 1e-12);
}

#[test]
fn adam_state_starts_empty() {
    let s = AdamState::<f64>::new(3);
    assert_eq!(s.t, 0);
    assert!(s.m.iter().chain(&s.v).all(Option::is_none));
}

#[test]
fn grid_picks_the_first_best_point() {
    assert_eq!(select_best(&[Some(0.7), Some(0.9), Some(0.9), Some(0.8)]), Some(1));
    assert_eq!(select_best(&[None, Some(0.1)]), Some(1));
    assert_eq!(select_best(&[None, None]), None);

    let spec = GridSpec::from_toml_str("learning_rate = [1e-3, 1e-4]\nbatch_size = [10, 20]").unwrap();
    assert_eq!(spec.len(), 4);
    let scores = [0.7, 0.9, 0.9, 0.8];
    for jobs in [1, 3] {
        let (results, best) = grid_search_with(&TrainConfig::kmu_fed(), &spec, jobs, |point, cfg| {
            // every point sees its own overrides applied
            for (k, v) in &point.overrides {
                match k.as_str() {
                    "learning_rate" => assert_eq!(cfg.learning_rate, v.as_float().unwrap()),
                    "batch_size" => assert_eq!(cfg.batch_size as i64, v.as_integer().unwrap()),
                    _ => unreachable!(),
                }
            }
            Ok((scores[point.index], None))
        })
        .unwrap();
        assert_eq!(results.len(), 4);
        assert_eq!(best, Some(1));
        let combos: HashSet<String> = results.iter().map(|r| format!("{:?}", r.point.overrides)).collect();
        assert_eq!(combos.len(), 4);
    }
}

#[test]
fn singleton_grid_and_failing_points() {
    let spec = GridSpec::from_toml_str("learning_rate = [1e-3]").unwrap();
    let (results, best) = grid_search_with(&TrainConfig::kmu_fed(), &spec, 1, |_, _| Ok((0.5, None))).unwrap();
    assert_eq!((results.len(), best), (1, Some(0)));

    let spec = GridSpec::from_toml_str("batch_size = [10, 0, 20]").unwrap();
    let (results, best) = grid_search_with(&TrainConfig::kmu_fed(), &spec, 2, |p, _| Ok((p.index as f64, None))).unwrap();
    assert!(results[1].error.is_some() && results[1].val_accuracy.is_none());
    assert_eq!(best, Some(2));
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 3);
    let cfg = small_config(dir.path(), 1);
    let (mut outcome, run) = train(&cfg, None).unwrap();
    let before = accuracy(&mut outcome.model, &run.loader, &run.test, 7).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::capture(&outcome.model.params, &outcome.model.net.config)).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    let mut restored = restore_model(&loaded).unwrap();
    restored.set_mode(Mode::Eval);
    let after = accuracy(&mut restored, &run.loader, &run.test, 7).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
    let batch = run.loader.batch(&run.test[..4], None).unwrap();
    assert_eq!(outcome.model.forward(&batch.images, 0).unwrap(), restored.forward(&batch.images, 0).unwrap());
}

#[test]
fn partial_load_reports_the_difference() {
    let mut donor_cfg = ModelConfig::with_classes(1000);
    donor_cfg.backbones = dualfer::fusion::Backbones::ShuffleNet;
    donor_cfg.head = HeadKind::Linear;
    let donor = build_model::<f32>(&donor_cfg, 3).unwrap();
    let ckpt = Checkpoint::capture(&donor.params, &donor_cfg);
    let mut model = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
    assert!(matches!(
        ckpt.apply(&mut model.params, false),
        Err(Error::Checkpoint(CheckpointError::NameMismatch { .. }))
    ));
    let report = ckpt.apply(&mut model.params, true).unwrap();
    assert!(!report.loaded.is_empty() && !report.missing.is_empty() && !report.unexpected.is_empty());
    assert!(report.loaded.iter().all(|n| n.starts_with("shufflenet.")));
    let id = model.params.find(&report.loaded[0]).unwrap();
    let donor_id = donor.params.find(&report.loaded[0]).unwrap();
    assert_eq!(model.params.tensor(id), donor.params.tensor(donor_id));
}

#[test]
fn flipped_byte_is_a_checksum_error() {
    let model = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
    let bytes = Checkpoint::capture(&model.params, &ModelConfig::default()).to_bytes().unwrap();
    for pos in [bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(
            matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::ChecksumMismatch))),
            "byte {pos}"
        );
    }
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
    ));
}

#[test]
fn two_fold_cross_validation() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 4);
    let cfg = small_config(dir.path(), 1);
    let index = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    let n = index.len();
    let out = dir.path().join("cv");
    let report = run_cross_validation_on(&cfg, 2, index, Some(&out)).unwrap();
    assert!(report.complete);
    assert_eq!(report.folds.len(), 2);
    let mean = report.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / 2.0;
    assert!((report.mean_accuracy - mean).abs() <= 1e-12);
    let mut all: Vec<usize> = report.folds.iter().flat_map(|f| f.test_indices.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..n).collect::<Vec<_>>());
    for f in &report.folds {
        assert_eq!(f.train_size + f.test_indices.len(), n);
    }
    assert!(out.join("crossval.json").is_file());
    assert!(out.join("fold-0").join("history.csv").is_file());
}
