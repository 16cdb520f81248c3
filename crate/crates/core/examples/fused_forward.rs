//! The fused model: Z = X ⊕ Y, the classifier head, and recovering X and Y
//! from Z.
//!
//! cargo run --release --example fused_forward

use dualfer::fusion::{build_model, classify, extract_features, fused_forward, unfuse, ModelConfig};
use dualfer::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualfer::Result<()> {
    let config = ModelConfig::with_classes(7);
    let mut model = build_model::<f32>(&config, 42)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Tensor::<f32>::randn([2, 3, 224, 224], 1.0, &mut rng);

    let (x, y, z) = extract_features(&mut model, &images, Mode::Eval)?;
    let (x, y) = (x.expect("fused model has X"), y.expect("fused model has Y"));
    println!("X {:?} ⊕ Y {:?} = Z {:?}", x.shape(), y.shape(), z.shape());
    let (x2, y2) = unfuse(&z, x.shape()[1])?;
    println!("unfuse recovers X and Y exactly: {}", x2 == x && y2 == y);

    let logits = fused_forward(&mut model, &images, Mode::Eval, 0)?;
    let from_z = classify(&mut model, &z, Mode::Eval, 0)?;
    println!("logits {:?}; head on Z matches: {}", logits.shape(), logits == from_z);
    println!("predicted classes {:?}", logits.argmax_rows()?);
    Ok(())
}
