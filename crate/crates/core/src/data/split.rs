use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::runtime::derive_seed;

const SPLIT_STREAM: u64 = 0x5350_4c49;
const CARVE_STREAM: u64 = 0x5641_4c49;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    KFold(usize),
    /// Fraction of samples placed in the training fold.
    HoldOut(f64),
}

/// Fold id per sample. For `HoldOut`, fold 0 is train and fold 1 is test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: u64,
    pub subject_disjoint: bool,
    pub folds: Vec<usize>,
    pub num_folds: usize,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Number of train/test rounds: `k` for k-fold, 1 for hold-out.
    pub fn rounds(&self) -> usize {
        match self.kind {
            SplitKind::KFold(k) => k,
            SplitKind::HoldOut(_) => 1,
        }
    }

    /// `(train, test)` indices of round `round`.
    pub fn train_test(&self, round: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if round >= self.rounds() {
            return Err(config_err!("round {round} out of range for {} rounds", self.rounds()));
        }
        Ok(match self.kind {
            SplitKind::KFold(_) => {
                let (test, train) = (0..self.folds.len()).partition(|&i| self.folds[i] == round);
                (train, test)
            }
            SplitKind::HoldOut(_) => (self.fold_indices(0), self.fold_indices(1)),
        })
    }

    /// Audit document: one fold id per sample path.
    pub fn to_json(&self, paths: &[PathBuf]) -> Result<String> {
        if paths.len() != self.folds.len() {
            return Err(config_err!("{} paths for a split of {} samples", paths.len(), self.folds.len()));
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            kind: SplitKind,
            seed: u64,
            subject_disjoint: bool,
            num_folds: usize,
            assignments: Vec<Assignment<'a>>,
        }
        #[derive(Serialize)]
        struct Assignment<'a> {
            path: &'a std::path::Path,
            fold: usize,
        }
        let doc = Doc {
            kind: self.kind,
            seed: self.seed,
            subject_disjoint: self.subject_disjoint,
            num_folds: self.num_folds,
            assignments: paths.iter().zip(&self.folds).map(|(p, &fold)| Assignment { path: p, fold }).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

fn validate(n: usize, kind: SplitKind) -> Result<()> {
    match kind {
        SplitKind::KFold(k) if k < 2 => Err(config_err!("k-fold needs k >= 2, got {k}")),
        SplitKind::KFold(k) if k > n => Err(config_err!("k = {k} exceeds the {n} available samples")),
        SplitKind::HoldOut(f) if !(f > 0.0 && f < 1.0) => Err(config_err!("hold-out fraction must be in (0, 1), got {f}")),
        SplitKind::HoldOut(_) if n < 2 => Err(config_err!("hold-out needs at least 2 samples, got {n}")),
        _ => Ok(()),
    }
}

/// Indices of each class, shuffled by `rng`; classes in ascending label order.
fn shuffled_classes(indices: &[usize], labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    by_class
        .into_values()
        .map(|mut v| {
            v.shuffle(rng);
            v
        })
        .collect()
}

/// `floor(fraction * n + 0.5)`.
pub fn holdout_train_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

/// Per-class train quotas summing to `holdout_train_size(total, fraction)`:
/// floors first, then the largest fractional remainders (ties to the lower label).
fn class_quotas(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = holdout_train_size(total, fraction);
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut assigned: usize = quotas.iter().sum();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            assigned += 1;
        }
    }
    quotas
}

/// Stratified two-way split of `indices`: `(first, second)` with
/// `holdout_train_size(len, fraction)` samples in `first`. Both are sorted.
fn stratified_two_way(indices: &[usize], labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = shuffled_classes(indices, labels, rng);
    let counts: Vec<usize> = classes.iter().map(Vec::len).collect();
    let quotas = class_quotas(&counts, fraction);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (members, q) in classes.iter().zip(quotas) {
        first.extend_from_slice(&members[..q]);
        second.extend_from_slice(&members[q..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Stratified split of `labels.len()` samples.
///
/// k-fold deals each class's shuffled members round-robin over the folds, with
/// the dealing position carried from one class to the next. Fold sizes then
/// differ by at most one overall and per class.
pub fn make_split(labels: &[usize], kind: SplitKind, seed: u64) -> Result<SplitPlan> {
    let n = labels.len();
    validate(n, kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_STREAM]));
    let all: Vec<usize> = (0..n).collect();
    let (folds, num_folds) = match kind {
        SplitKind::KFold(k) => {
            let mut folds = vec![0; n];
            let mut next = 0;
            for members in shuffled_classes(&all, labels, &mut rng) {
                for i in members {
                    folds[i] = next;
                    next = (next + 1) % k;
                }
            }
            (folds, k)
        }
        SplitKind::HoldOut(f) => {
            let (_, test) = stratified_two_way(&all, labels, f, &mut rng);
            let mut folds = vec![0; n];
            test.into_iter().for_each(|i| folds[i] = 1);
            (folds, 2)
        }
    };
    Ok(SplitPlan {
        kind,
        seed,
        subject_disjoint: false,
        folds,
        num_folds,
    })
}

/// Subject-disjoint split: all samples of a subject share a fold. Samples
/// without a subject id form singleton groups. Groups are shuffled, sorted by
/// size (largest first) and each goes to the currently smallest fold, so fold
/// sizes are balanced as far as the group sizes allow. Class stratification is
/// not guaranteed.
pub fn make_subject_split(labels: &[usize], subjects: &[Option<String>], kind: SplitKind, seed: u64) -> Result<SplitPlan> {
    let n = labels.len();
    if subjects.len() != n {
        return Err(config_err!("{} subject ids for {n} samples", subjects.len()));
    }
    validate(n, kind)?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut singles = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        match s {
            Some(s) => groups.entry(s.clone()).or_default().push(i),
            None => singles.push(vec![i]),
        }
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().chain(singles).collect();
    let num_groups = groups.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_STREAM, 1]));
    groups.shuffle(&mut rng);
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let mut folds = vec![0; n];
    let num_folds = match kind {
        SplitKind::KFold(k) => {
            if k > num_groups {
                return Err(config_err!("k = {k} exceeds the {num_groups} distinct subjects"));
            }
            let mut sizes = vec![0usize; k];
            for g in &groups {
                let f = (0..k).min_by_key(|&f| (sizes[f], f)).unwrap_or(0);
                sizes[f] += g.len();
                g.iter().for_each(|&i| folds[i] = f);
            }
            k
        }
        SplitKind::HoldOut(frac) => {
            if num_groups < 2 {
                return Err(config_err!("hold-out by subject needs at least 2 subjects"));
            }
            let target = holdout_train_size(n, frac);
            let mut train = 0;
            for (gi, g) in groups.iter().enumerate() {
                // keep at least one group on each side
                let must_test = gi + 1 == num_groups && train > 0;
                let take = gi == 0 || (!must_test && train + g.len() <= target);
                if take {
                    train += g.len();
                } else {
                    g.iter().for_each(|&i| folds[i] = 1);
                }
            }
            2
        }
    };
    Ok(SplitPlan {
        kind,
        seed,
        subject_disjoint: true,
        folds,
        num_folds,
    })
}

/// Stratified `(train, validation)` carve-out of `fraction` of `train`,
/// used for model selection under the hold-out protocol.
pub fn carve_validation(train: &[usize], labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(config_err!("validation fraction must be in (0, 1), got {fraction}"));
    }
    if train.len() < 2 {
        return Err(config_err!("cannot carve a validation set from {} samples", train.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[CARVE_STREAM]));
    let (rest, val) = stratified_two_way(train, labels, 1.0 - fraction, &mut rng);
    Ok((rest, val))
}
