//! Grid search over learning rate and batch size on the fixture, with two
//! points trained at a time.
//!
//! cargo run --release --example grid_search -- [out_dir]

use std::path::PathBuf;

use dualfer::data::{generate_fixture, AugmentPolicy, FixtureSpec};
use dualfer::train::{grid_search, GridSpec, Protocol, TrainConfig};

const GRID: &str = r#"
[grid]
learning_rate = [1e-3, 1e-4]
batch_size = [10, 20]
"#;

fn main() -> dualfer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "grid_demo".into()));
    let data = out.join("fixture");
    generate_fixture(&data, &FixtureSpec { size: 48, per_class: 6, ..FixtureSpec::default() })?;

    let mut base = TrainConfig::kmu_fed();
    base.dataset_root = Some(data);
    base.epochs = 4;
    base.split.protocol = Protocol::HoldOut;
    base.augment = AugmentPolicy::none();
    base.model.shufflenet.input_size = 48;
    base.model.efficientvit.input_size = 48;

    let spec = GridSpec::from_toml_str(GRID)?;
    println!("{} grid points", spec.len());
    let (results, best, best_cfg) = grid_search(&base, &spec, &out.join("search"), 2)?;
    for r in &results {
        println!("point {}: {:?} -> {:?}", r.point.index, r.point.overrides, r.val_accuracy);
    }
    if let (Some(i), Some(cfg)) = (best, best_cfg) {
        println!("best point {i}: lr {} batch {}", cfg.learning_rate, cfg.batch_size);
    }
    Ok(())
}
