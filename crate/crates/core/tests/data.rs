//! Fixture round-trips, linear separability of the fixture, and the split
//! protocol laws.

use std::collections::{BTreeMap, HashSet};

use dualfer::data::augment::hflip;
use dualfer::data::fixture::fixture_class_name;
use dualfer::data::preprocess::read_image;
use dualfer::data::{
    carve_validation, generate_fixture, load_dataset, make_split, make_subject_split, FixtureSpec, LoadOptions, Loader,
    Normalization, SplitKind, SplitPlan,
};
use dualfer::Tensor;
use proptest::prelude::*;

#[test]
fn fixture_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let paths = generate_fixture(dir.path(), &FixtureSpec::default()).unwrap();
    assert_eq!(paths.len(), 60);
    let index = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(index.len(), 60);
    assert_eq!(index.classes, (0..6).map(fixture_class_name).collect::<Vec<_>>());
    assert_eq!(index.class_counts(), vec![10; 6]);
    let listed: Vec<_> = index.entries.iter().map(|e| e.path.clone()).collect();
    assert_eq!(listed, paths);
    for (i, path) in paths.iter().enumerate() {
        let sample = index.load_sample(i).unwrap();
        assert_eq!(sample.label, i / 10);
        assert_eq!(index.entries[i].path, *path);
        assert_eq!(sample.image, read_image(path).unwrap());
        assert_eq!(sample.image.shape(), &[3, 224, 224]);
        assert!(sample.subject_id.is_some());
    }
}

#[test]
fn small_fixture_has_two_labels() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        classes: 2,
        per_class: 3,
        size: 32,
        ..FixtureSpec::default()
    };
    generate_fixture(dir.path(), &spec).unwrap();
    let index = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(index.labels(), vec![0, 0, 0, 1, 1, 1]);
}

/// Multinomial logistic regression on raw pixels, trained by full-batch
/// gradient descent with plain loops.
fn linear_probe_accuracy(x: &[Vec<f32>], y: &[usize], k: usize, steps: usize, lr: f32) -> f64 {
    let d = x[0].len();
    let mut w = vec![0.0f32; k * d];
    let mut b = vec![0.0f32; k];
    let n = x.len() as f32;
    let logits = |w: &[f32], b: &[f32], xi: &[f32]| -> Vec<f32> {
        (0..k).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(p, q)| p * q).sum::<f32>()).collect()
    };
    for _ in 0..steps {
        let mut gw = vec![0.0f32; k * d];
        let mut gb = vec![0.0f32; k];
        for (xi, &yi) in x.iter().zip(y) {
            let z = logits(&w, &b, xi);
            let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == yi { 1.0 } else { 0.0 };
                gb[c] += g / n;
                for (gw, &xv) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                    *gw += g * xv / n;
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= lr * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g);
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z = logits(&w, &b, xi);
            let best = (0..k).max_by(|&p, &q| z[p].partial_cmp(&z[q]).unwrap()).unwrap();
            best == yi
        })
        .count();
    correct as f64 / x.len() as f64
}

#[test]
fn fixture_is_linearly_separable_on_raw_pixels() {
    let dir = tempfile::tempdir().unwrap();
    generate_fixture(dir.path(), &FixtureSpec::default()).unwrap();
    let index = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    let loader = Loader::from_index(&index, 224, Normalization::identity(), false).unwrap();
    // raw pixels, mean-centred per feature
    let mut x: Vec<Vec<f32>> = (0..loader.len()).map(|i| loader.resized(i).unwrap().data().to_vec()).collect();
    let d = x[0].len();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f32>() / x.len() as f32;
        x.iter_mut().for_each(|r| r[j] -= mean);
    }
    let acc = linear_probe_accuracy(&x, loader.labels(), 6, 40, 0.01);
    assert!(acc >= 0.9, "linear probe train accuracy {acc}");
}

#[test]
fn flip_is_an_involution() {
    let img = Tensor::from_fn([3, 5, 4], |i| i as f32 * 0.01);
    assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img);
    let small = Tensor::new([3, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(hflip(&small).unwrap().data(), &[2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);
}

/// Partition, size balance and per-class balance of a k-fold plan.
fn check_kfold(plan: &SplitPlan, labels: &[usize], k: usize) {
    assert_eq!(plan.num_folds, k);
    let mut seen = vec![false; labels.len()];
    for f in 0..k {
        for i in plan.fold_indices(f) {
            assert!(!seen[i], "index {i} in two folds");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
    let sizes = plan.fold_sizes();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let per_fold: Vec<usize> = (0..k)
            .map(|f| plan.fold_indices(f).iter().filter(|&&i| labels[i] == c).count())
            .collect();
        assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1, "class {c}: {per_fold:?}");
    }
}

#[test]
fn ten_folds_of_1106() {
    // imbalanced class sizes that sum to 1106
    let counts = [200usize, 150, 230, 180, 176, 170];
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect();
    assert_eq!(labels.len(), 1106);
    let plan = make_split(&labels, SplitKind::KFold(10), 7).unwrap();
    let mut sizes = plan.fold_sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, [111, 111, 111, 111, 111, 111, 110, 110, 110, 110]);
    check_kfold(&plan, &labels, 10);
    for round in 0..10 {
        let (train, test) = plan.train_test(round).unwrap();
        assert_eq!(train.len() + test.len(), 1106);
        let test: HashSet<usize> = test.into_iter().collect();
        assert!(train.iter().all(|i| !test.contains(i)));
    }
}

#[test]
fn holdout_of_1106() {
    let labels: Vec<usize> = (0..1106).map(|i| i % 6).collect();
    let plan = make_split(&labels, SplitKind::HoldOut(0.8), 3).unwrap();
    let (train, test) = plan.train_test(0).unwrap();
    assert_eq!((train.len(), test.len()), (885, 221));
}

fn labels_strategy() -> impl Strategy<Value = Vec<usize>> {
    (2usize..7).prop_flat_map(|k| prop::collection::vec(0..k, 12..200))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kfold_partitions_and_stratifies(labels in labels_strategy(), k in 2usize..11, seed in any::<u64>()) {
        let plan = make_split(&labels, SplitKind::KFold(k), seed).unwrap();
        check_kfold(&plan, &labels, k);
        prop_assert_eq!(plan, make_split(&labels, SplitKind::KFold(k), seed).unwrap());
    }

    #[test]
    fn holdout_is_a_stratified_two_way_partition(labels in labels_strategy(), f in 0.1f64..0.9, seed in any::<u64>()) {
        let plan = make_split(&labels, SplitKind::HoldOut(f), seed).unwrap();
        let (train, test) = plan.train_test(0).unwrap();
        prop_assert_eq!(train.len(), (f * labels.len() as f64 + 0.5).floor() as usize);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        // each class lands within one sample of its proportional share
        let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for &i in &train {
            per_class.entry(labels[i]).or_default().0 += 1;
        }
        for &l in &labels {
            per_class.entry(l).or_default().1 += 1;
        }
        for (c, (tr, total)) in per_class {
            let share = f * total as f64;
            prop_assert!((tr as f64 - share).abs() <= 1.0 + 1e-9, "class {} got {} of {}", c, tr, total);
        }
    }

    #[test]
    fn subject_folds_never_share_a_subject(labels in labels_strategy(), subjects in 3usize..12, seed in any::<u64>()) {
        let ids: Vec<Option<String>> = (0..labels.len()).map(|i| Some(format!("s{}", i % subjects))).collect();
        let k = 3;
        let plan = make_subject_split(&labels, &ids, SplitKind::KFold(k), seed).unwrap();
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, &fold) in plan.folds.iter().enumerate() {
            let s = ids[i].as_deref().unwrap();
            prop_assert_eq!(*owner.entry(s).or_insert(fold), fold);
        }
    }

    #[test]
    fn validation_carve_out_is_disjoint(labels in labels_strategy(), seed in any::<u64>()) {
        let train: Vec<usize> = (0..labels.len()).filter(|i| i % 3 != 0).collect();
        let (rest, val) = carve_validation(&train, &labels, 0.2, seed).unwrap();
        let mut all: Vec<usize> = rest.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, train);
    }
}
