//! Confusion-matrix statistics against a brute-force recount over every
//! labeling of small sample sets.

use dualfer::eval::MetricsReport;
use proptest::prelude::*;

/// Per-class precision, recall and F1 counted straight from the pairs.
fn brute(labels: &[usize], preds: &[usize], k: usize) -> (Vec<Vec<u64>>, f64, [f64; 3]) {
    let mut confusion = vec![vec![0u64; k]; k];
    for t in 0..k {
        for p in 0..k {
            confusion[t][p] = labels.iter().zip(preds).filter(|&(&a, &b)| a == t && b == p).count() as u64;
        }
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = labels.iter().zip(preds).filter(|&(&a, &b)| a == c && b == c).count() as f64;
        let predicted = preds.iter().filter(|&&b| b == c).count() as f64;
        let actual = labels.iter().filter(|&&a| a == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
    }
    let correct = labels.iter().zip(preds).filter(|(a, b)| a == b).count() as f64;
    let k = k as f64;
    (confusion, correct / labels.len() as f64, [sp / k, sr / k, sf / k])
}

/// Every sequence of length `n` over `0..k`.
fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let d = code % k;
                    code /= k;
                    d
                })
                .collect()
        })
        .collect()
}

#[test]
fn exhaustive_small_labelings() {
    let mut checked = 0usize;
    for k in 1..=3usize {
        for n in 1..=6usize {
            // pairs of (labels, predictions) encoded as one sequence of length 2n
            for seq in all_sequences(2 * n, k) {
                let (labels, preds) = seq.split_at(n);
                let m = MetricsReport::from_predictions(labels, preds, k).unwrap();
                let (confusion, acc, [p, r, f]) = brute(labels, preds, k);
                assert_eq!(m.confusion, confusion);
                assert_eq!(m.accuracy, acc);
                assert_eq!((m.macro_precision, m.macro_recall, m.macro_f1), (p, r, f), "{labels:?} {preds:?}");
                checked += 1;
            }
        }
    }
    let expected: usize = (1..=3usize).map(|k| (1..=6u32).map(|n| k.pow(2 * n)).sum::<usize>()).sum();
    assert_eq!(checked, expected);
}

proptest! {
    #[test]
    fn six_samples_three_classes(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..=6)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = MetricsReport::from_predictions(&labels, &preds, 3).unwrap();
        let (confusion, acc, [p, r, f]) = brute(&labels, &preds, 3);
        prop_assert_eq!(&m.confusion, &confusion);
        prop_assert_eq!(m.accuracy, acc);
        prop_assert_eq!((m.macro_precision, m.macro_recall, m.macro_f1), (p, r, f));
        let total: u64 = m.confusion.iter().flatten().sum();
        prop_assert_eq!(total as usize, labels.len());
        for row in m.row_normalized() {
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn report_survives_json() {
    let m = MetricsReport::from_predictions(&[0, 1, 2, 2, 1], &[0, 2, 2, 1, 1], 3)
        .unwrap()
        .with_class_names(&["a".into(), "b".into(), "c".into()]);
    let text = serde_json::to_string(&m).unwrap();
    let back: MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, m);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(MetricsReport::from_predictions(&[], &[], 2).is_err());
    assert!(MetricsReport::from_predictions(&[0, 1], &[0], 2).is_err());
    assert!(MetricsReport::from_predictions(&[0, 2], &[0, 1], 2).is_err());
}
