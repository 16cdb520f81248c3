//! Save and reload a checkpoint, then initialize a fused model from a
//! ShuffleNet-only checkpoint with a partial load.
//!
//! cargo run --release --example checkpoint_transfer

use dualfer::fusion::{build_model, Backbones, HeadKind, ModelConfig};
use dualfer::train::{load_checkpoint, restore_model, save_checkpoint, Checkpoint};
use dualfer::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualfer::Result<()> {
    let dir = tempfile_dir();
    let config = ModelConfig::with_classes(6);
    let mut model = build_model::<f32>(&config, 11)?;
    let path = dir.join("fused.ckpt");
    save_checkpoint(&path, &Checkpoint::capture(&model.params, &config))?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn([2, 3, 224, 224], 1.0, &mut rng);
    model.set_mode(Mode::Eval);
    let before = model.forward(&x, 0)?;
    let mut reloaded = restore_model(&load_checkpoint::<f32>(&path)?)?;
    reloaded.set_mode(Mode::Eval);
    println!("reloaded logits identical: {}", reloaded.forward(&x, 0)? == before);

    // a ShuffleNet classifier stands in for pretrained backbone weights
    let single = ModelConfig {
        backbones: Backbones::ShuffleNet,
        head: HeadKind::Linear,
        num_classes: 1000,
        ..ModelConfig::default()
    };
    let donor = build_model::<f32>(&single, 3)?;
    let donor_path = dir.join("shufflenet.ckpt");
    save_checkpoint(&donor_path, &Checkpoint::capture(&donor.params, &single))?;

    let mut fused = build_model::<f32>(&config, 12)?;
    let ckpt: Checkpoint<f32> = load_checkpoint(&donor_path)?;
    let report = ckpt.apply(&mut fused.params, true)?;
    println!(
        "partial load: {} tensors loaded, {} left at their initial values, {} ignored",
        report.loaded.len(),
        report.missing.len(),
        report.unexpected.len()
    );
    match ckpt.apply(&mut fused.params, false) {
        Ok(_) => println!("strict load unexpectedly succeeded"),
        Err(e) => println!("strict load refused: {e}"),
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("dualfer-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
