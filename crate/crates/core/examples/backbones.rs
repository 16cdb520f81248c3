//! Each backbone on its own: feature widths, stage shapes and parameter counts.
//!
//! cargo run --release --example backbones

use dualfer::efficientvit::{build_efficientvit, EfficientVitConfig};
use dualfer::shufflenet::{build_shufflenet, ShuffleNetConfig};
use dualfer::{Ctx, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualfer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::<f32>::randn([2, 3, 224, 224], 1.0, &mut rng);

    let mut shuffle = build_shufflenet::<f32>(&ShuffleNetConfig::default(), 1)?;
    let mut ctx = Ctx::new(&mut shuffle.params, Mode::Eval, 0, false);
    let x = ctx.input(images.clone());
    let (features, stages) = shuffle.net.forward_with_stages(&mut ctx, x)?;
    println!("ShuffleNet V2: {} parameters", ctx.params().count(false));
    for (i, s) in stages.iter().enumerate() {
        println!("  stage{} -> {:?}", i + 2, ctx.tape.shape(*s));
    }
    println!("  features X {:?}", ctx.tape.shape(features));

    let mut vit = build_efficientvit::<f32>(&EfficientVitConfig::default(), 2)?;
    let mut ctx = Ctx::new(&mut vit.params, Mode::Eval, 0, false);
    let x = ctx.input(images);
    let (features, stages) = vit.net.forward_with_stages(&mut ctx, x)?;
    println!("EfficientViT: {} parameters", ctx.params().count(false));
    for (i, s) in stages.iter().enumerate() {
        println!("  stage{i} -> {:?}", ctx.tape.shape(*s));
    }
    println!("  features Y {:?}", ctx.tape.shape(features));
    Ok(())
}
