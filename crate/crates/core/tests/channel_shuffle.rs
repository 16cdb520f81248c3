//! Channel-shuffle laws over C ∈ {2, 4, 8, 16} and every valid group count.

use dualfer::ops::channel_shuffle_tensor;
use dualfer::Tensor;
use proptest::prelude::*;

/// Reference permutation via reshape (g, C/g) -> transpose -> flatten:
/// output channel `j` reads input channel `(j % g) * (C/g) + j / g`.
fn reference(x: &Tensor<f64>, g: usize) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let per = c / g;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for j in 0..c {
            let src = (j % g) * per + j / g;
            let (d, s) = ((b * c + j) * inner, (b * c + src) * inner);
            out[d..d + inner].copy_from_slice(&x.data()[s..s + inner]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn divisors(c: usize) -> Vec<usize> {
    (1..=c).filter(|g| c % g == 0).collect()
}

fn case() -> impl Strategy<Value = (Tensor<f64>, usize)> {
    (prop::sample::select(vec![2usize, 4, 8, 16]), 1usize..3, 1usize..4)
        .prop_flat_map(|(c, n, hw)| {
            let len = n * c * hw * hw;
            (
                prop::collection::vec(-1e3f64..1e3, len),
                prop::sample::select(divisors(c)),
                Just([n, c, hw, hw]),
            )
        })
        .prop_map(|(data, g, shape)| (Tensor::new(shape, data).unwrap(), g))
}

proptest! {
    #[test]
    fn shuffle_is_a_permutation_of_channels((x, g) in case()) {
        let y = channel_shuffle_tensor(&x, g).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(&y, &reference(&x, g));
        let (c, inner) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        for (xs, ys) in x.data().chunks(c * inner).zip(y.data().chunks(c * inner)) {
            let mut a: Vec<&[f64]> = xs.chunks(inner).collect();
            let mut b: Vec<&[f64]> = ys.chunks(inner).collect();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            b.sort_by(|p, q| p.partial_cmp(q).unwrap());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn shuffle_by_complementary_groups_is_identity((x, g) in case()) {
        let c = x.shape()[1];
        let back = channel_shuffle_tensor(&channel_shuffle_tensor(&x, g).unwrap(), c / g).unwrap();
        prop_assert_eq!(back, x);
    }
}

#[test]
fn every_valid_group_count_is_exhaustively_covered() {
    for c in [2usize, 4, 8, 16] {
        let x = Tensor::from_fn([1, c, 1, 1], |i| i as f64);
        for g in divisors(c) {
            let y = channel_shuffle_tensor(&x, g).unwrap();
            assert_eq!(y, reference(&x, g), "C={c} g={g}");
            assert_eq!(channel_shuffle_tensor(&y, c / g).unwrap(), x, "C={c} g={g}");
        }
        assert!(channel_shuffle_tensor(&x, c + 1).is_err());
    }
    let x = Tensor::from_fn([1, 4, 1, 1], |i| i as f64);
    assert_eq!(channel_shuffle_tensor(&x, 2).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
    assert_eq!(channel_shuffle_tensor(&x, 1).unwrap(), x);
}
