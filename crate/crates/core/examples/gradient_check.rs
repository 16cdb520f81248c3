//! Finite-difference checks of a few primitives' backward passes.
//!
//! cargo run --release --example gradient_check

use dualfer::gradcheck::check_gradients;
use dualfer::ops::{attention, conv2d, cross_entropy, linear, Conv2dSpec};
use dualfer::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualfer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng);

    let depthwise = Conv2dSpec {
        stride: 2,
        padding: 1,
        groups: 4,
    };
    let r = check_gradients(&[randn(&[1, 4, 4, 4]), randn(&[4, 1, 3, 3])], &[], 1e-6, |t, v| {
        conv2d(t, v[0], v[1], None, depthwise)
    })?;
    println!("depthwise conv, stride 2: {:.2e}", r.max_rel_error());

    let r = check_gradients(&[randn(&[3, 5]), randn(&[5, 4]), randn(&[4])], &[], 1e-6, |t, v| {
        linear(t, v[0], v[1], Some(v[2]))
    })?;
    println!("linear:                   {:.2e}", r.max_rel_error());

    let qkv = [randn(&[1, 2, 2, 3]), randn(&[1, 2, 2, 3]), randn(&[1, 3, 2, 3])];
    let r = check_gradients(&qkv, &[], 1e-6, |t, v| attention(t, v[0], v[1], v[2], None, 0.5))?;
    println!("attention:                {:.2e}", r.max_rel_error());

    let r = check_gradients(&[randn(&[4, 3])], &[], 1e-6, |t, v| cross_entropy(t, v[0], &[0, 2, 1, 2]))?;
    println!("cross-entropy:            {:.2e}", r.max_rel_error());
    Ok(())
}
