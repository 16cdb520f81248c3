//! Stratified k-fold cross-validation on the fixture: one model per fold,
//! per-fold metrics and the mean ± std summary.
//!
//! cargo run --release --example cross_validation -- [out_dir]

use std::path::PathBuf;

use dualfer::data::{generate_fixture, AugmentPolicy, FixtureSpec};
use dualfer::eval::run_cross_validation;
use dualfer::train::TrainConfig;

fn main() -> dualfer::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crossval_demo".into()));
    let data = out.join("fixture");
    generate_fixture(&data, &FixtureSpec { size: 48, ..FixtureSpec::default() })?;

    let mut cfg = TrainConfig::kmu_fed();
    cfg.dataset_root = Some(data);
    cfg.batch_size = 16;
    cfg.epochs = 15;
    cfg.eval_every = 15;
    cfg.augment = AugmentPolicy::none();
    cfg.model.shufflenet.input_size = 48;
    cfg.model.efficientvit.input_size = 48;

    let report = run_cross_validation(&cfg, 5, Some(&out.join("folds")))?;
    for f in &report.folds {
        println!("fold {}: accuracy {:.3}, macro F1 {:.3}", f.fold, f.metrics.accuracy, f.metrics.macro_f1);
    }
    println!(
        "{}-fold accuracy {:.3} ± {:.3}",
        report.k, report.mean_accuracy, report.std_accuracy
    );
    Ok(())
}
