//! The evaluation pipeline (resize + normalize) and the training
//! augmentations, written out as PNGs for inspection.
//!
//! cargo run --release --example preprocess_augment -- [out_dir]

use std::fs;

use dualfer::data::preprocess::tensor_to_rgb;
use dualfer::data::{augment_image, generate_fixture, preprocess, AugmentPolicy, FixtureSpec, Normalization};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualfer::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "augment_demo".into()));
    let spec = FixtureSpec {
        classes: 2,
        per_class: 1,
        size: 160,
        ..FixtureSpec::default()
    };
    let src = generate_fixture(out.join("source"), &spec)?.remove(0);
    let bytes = fs::read(&src).expect("fixture image");

    let input = preprocess(&bytes, 224, &Normalization::default())?;
    let mean: f32 = input.data().iter().sum::<f32>() / input.len() as f32;
    println!("model input {:?}, mean after normalization {mean:.3}", input.shape());

    let raw = preprocess(&bytes, 224, &Normalization::identity())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..4 {
        let aug = augment_image(&raw, &AugmentPolicy::default(), &mut rng)?;
        let path = out.join(format!("augmented_{i}.png"));
        tensor_to_rgb(&aug)?.save(&path).expect("write png");
        println!("wrote {}", path.display());
    }
    Ok(())
}
