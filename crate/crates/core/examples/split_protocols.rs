//! Stratified 10-fold, 80:20 hold-out and subject-disjoint splits.
//!
//! cargo run --release --example split_protocols

use dualfer::data::{carve_validation, make_split, make_subject_split, SplitKind};

fn main() -> dualfer::Result<()> {
    // 1106 samples over 6 classes, as in a KMU-FED-sized dataset
    let labels: Vec<usize> = (0..1106).map(|i| i * 6 / 1106).collect();

    let kfold = make_split(&labels, SplitKind::KFold(10), 42)?;
    println!("10-fold sizes: {:?}", kfold.fold_sizes());

    let holdout = make_split(&labels, SplitKind::HoldOut(0.8), 42)?;
    let (train, test) = holdout.train_test(0)?;
    let (fit, val) = carve_validation(&train, &labels, 0.1, 42)?;
    println!("hold-out: {} train ({} fit + {} validation), {} test", train.len(), fit.len(), val.len(), test.len());

    let subjects: Vec<Option<String>> = (0..1106).map(|i| Some(format!("s{:02}", i % 12))).collect();
    let by_subject = make_subject_split(&labels, &subjects, SplitKind::KFold(4), 42)?;
    println!("subject-disjoint 4-fold sizes: {:?}", by_subject.fold_sizes());

    let paths: Vec<std::path::PathBuf> = (0..10).map(|i| format!("img{i}.png").into()).collect();
    let small = make_split(&labels[..10], SplitKind::KFold(5), 0)?;
    println!("{}", small.to_json(&paths)?);
    Ok(())
}
