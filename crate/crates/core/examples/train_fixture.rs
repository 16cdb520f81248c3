//! Train the fused model on the synthetic fixture with a hold-out split and
//! write history, checkpoints and split assignments.
//!
//! cargo run --release --example train_fixture -- [out_dir]
//!
//! Images are downscaled to 64 pixels so the run takes about a minute on one
//! core; drop the two `input_size` lines for the full 224-pixel model.

use std::path::PathBuf;

use dualfer::data::{generate_fixture, AugmentPolicy, FixtureSpec};
use dualfer::train::{train, Protocol, TrainConfig};

fn main() -> dualfer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_demo".into()));
    let data = out.join("fixture");
    generate_fixture(&data, &FixtureSpec { size: 64, ..FixtureSpec::default() })?;

    let mut cfg = TrainConfig::kmu_fed();
    cfg.dataset_root = Some(data);
    cfg.batch_size = 16;
    cfg.epochs = 15;
    cfg.eval_every = 5;
    cfg.split.protocol = Protocol::HoldOut;
    cfg.augment = AugmentPolicy {
        rotation: false,
        ..AugmentPolicy::default()
    };
    cfg.model.shufflenet.input_size = 64;
    cfg.model.efficientvit.input_size = 64;

    let (outcome, run) = train(&cfg, Some(&out.join("run")))?;
    for r in &outcome.history {
        println!("epoch {:>2}  loss {:.4}  val {:?}", r.epoch, r.train_loss, r.val_accuracy);
    }
    let mut model = outcome.model;
    let test = dualfer::train::accuracy(&mut model, &run.loader, &run.test, 16)?;
    println!(
        "{} train / {} val / {} test images; test accuracy {test:.3}",
        run.train.len(),
        run.val.len(),
        run.test.len()
    );
    println!("best checkpoint: {:?}", outcome.best_checkpoint);
    Ok(())
}
