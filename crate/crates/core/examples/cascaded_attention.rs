//! One cascaded group attention layer: attention maps per head and how
//! zeroing an early head changes the later ones through the cascade.
//!
//! cargo run --release --example cascaded_attention

use dualfer::efficientvit::{CascadedGroupAttention, EfficientVitConfig};
use dualfer::ops::BatchNormSpec;
use dualfer::params::{ParamBuilder, ParamStore};
use dualfer::{Ctx, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualfer::Result<()> {
    let cfg = EfficientVitConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let attn = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, BatchNormSpec::default());
        CascadedGroupAttention::new(&mut pb, 64, 4, 16, 7, &cfg, 1.0)?
    };
    let x = Tensor::<f32>::randn([1, 64, 7, 7], 1.0, &mut rng);

    let mut ctx = Ctx::new(&mut store, Mode::Eval, 0, false);
    let xv = ctx.input(x.clone());
    let (y, maps) = attn.forward_with_maps(&mut ctx, xv)?;
    println!("{} heads, output {:?}", attn.num_heads(), ctx.tape.shape(y));
    for (i, m) in maps.iter().enumerate() {
        let row: f32 = m.data()[..49].iter().sum();
        println!("  head {i}: map {:?}, first row sums to {row:.4}", m.shape());
    }

    let plain = attn.head_outputs(&mut ctx, xv, None, None)?;
    let ablated = attn.head_outputs(&mut ctx, xv, Some(0), None)?;
    for i in 1..attn.num_heads() {
        let diff = ctx.tape.value(plain[i]).max_abs_diff(ctx.tape.value(ablated[i]))?;
        println!("  zeroing head 0 moves head {i} by up to {diff:.4}");
    }
    Ok(())
}
