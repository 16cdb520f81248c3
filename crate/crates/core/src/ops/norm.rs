use crate::autograd::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::graph::Mode;
use crate::runtime::parallel_tasks;
use crate::tensor::{dot_lanes, sum_lanes, Element, Tensor};

/// Batch-norm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BatchNormSpec {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel running statistics updated in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<E: Element = f32> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

impl<E: Element> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
        }
    }
}

/// `f(b)` for every sample `b`, computed in parallel and returned in order.
fn per_sample<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    parallel_tasks(slots.iter_mut().enumerate().collect(), |(b, slot)| *slot = Some(f(b)));
    slots.into_iter().map(|s| s.expect("every sample computed")).collect()
}

/// `(N, C, L)` view of an `(N, C)` or `(N, C, H, W)` tensor.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(dim_err!("batch_norm expects (N,C) or (N,C,H,W), got {:?}", shape)),
    }
}

struct BatchNormBackward<E> {
    mean: Vec<E>,
    inv_std: Vec<E>,
    batch_stats: bool,
}

impl<E: Element> Backward<E> for BatchNormBackward<E> {
    fn backward(
        &self,
        dy: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, l) = layout(x.shape())?;
        let (xd, dyd, gd) = (x.data(), dy.data(), gamma.data());
        let m = E::from_usize(n * l).unwrap();

        // per-sample partial sums, folded in sample order
        let partials = per_sample(n, |b| {
            let mut scratch = Vec::with_capacity(l);
            (0..c)
                .map(|ch| {
                    let off = (b * c + ch) * l;
                    let g = &dyd[off..off + l];
                    scratch.clear();
                    scratch.extend(xd[off..off + l].iter().map(|&v| v - self.mean[ch]));
                    (sum_lanes(g), dot_lanes(g, &scratch) * self.inv_std[ch])
                })
                .collect::<Vec<_>>()
        });
        let mut dgamma = vec![E::zero(); c];
        let mut dbeta = vec![E::zero(); c];
        for part in &partials {
            for (ch, &(sg, sgx)) in part.iter().enumerate() {
                dbeta[ch] += sg;
                dgamma[ch] += sgx;
            }
        }

        let dx = needs[0].then(|| {
            let mut dx = vec![E::zero(); x.len()];
            let tasks: Vec<_> = dx.chunks_mut(c * l).enumerate().collect();
            parallel_tasks(tasks, |(b, dxb)| {
                for ch in 0..c {
                    let off = (b * c + ch) * l;
                    let (mu, is, g) = (self.mean[ch], self.inv_std[ch], gd[ch]);
                    let (xs, gs) = (&xd[off..off + l], &dyd[off..off + l]);
                    let dst = &mut dxb[ch * l..(ch + 1) * l];
                    if self.batch_stats {
                        let k1 = dbeta[ch] / m;
                        let k2 = dgamma[ch] / m;
                        for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                            let xhat = (xv - mu) * is;
                            *d = g * is * (gv - k1 - xhat * k2);
                        }
                    } else {
                        for (d, &gv) in dst.iter_mut().zip(gs) {
                            *d = g * is * gv;
                        }
                    }
                }
            });
            Tensor::new(x.shape().to_vec(), dx)
        });
        Ok(vec![
            dx.transpose()?,
            needs[1].then(|| Tensor::new([c], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new([c], dbeta)).transpose()?,
        ])
    }
}

/// Batch normalization over `(N, C)` or `(N, C, H, W)` inputs.
///
/// Train mode normalizes with the biased batch variance and blends the same
/// statistics into `stats` with weight `momentum`. Eval mode uses `stats` only.
pub fn batch_norm<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats<E>,
    mode: Mode,
    spec: BatchNormSpec,
) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c, l) = layout(xv.shape())?;
    for (what, t) in [
        ("gamma", tape.value(gamma)),
        ("beta", tape.value(beta)),
        ("running_mean", &stats.mean),
        ("running_var", &stats.var),
    ] {
        if t.shape() != [c] {
            return Err(dim_err!("batch_norm {what} must be ({c},), got {:?}", t.shape()));
        }
    }
    let eps = E::from_f64_lossy(spec.eps);
    let xd = xv.data();
    let (mean, var) = match mode {
        Mode::Train => {
            if n * l == 0 {
                return Err(dim_err!("batch_norm on an empty batch"));
            }
            let m = E::from_usize(n * l).unwrap();
            let mut mean = vec![E::zero(); c];
            for part in per_sample(n, |b| (0..c).map(|ch| sum_lanes(&xd[(b * c + ch) * l..][..l])).collect::<Vec<_>>()) {
                mean.iter_mut().zip(part).for_each(|(m, p)| *m += p);
            }
            mean.iter_mut().for_each(|v| *v = *v / m);
            let mut var = vec![E::zero(); c];
            let sq = per_sample(n, |b| {
                let mut scratch = Vec::with_capacity(l);
                (0..c)
                    .map(|ch| {
                        scratch.clear();
                        scratch.extend(xd[(b * c + ch) * l..][..l].iter().map(|&v| v - mean[ch]));
                        dot_lanes(&scratch, &scratch)
                    })
                    .collect::<Vec<_>>()
            });
            for part in sq {
                var.iter_mut().zip(part).for_each(|(v, p)| *v += p);
            }
            var.iter_mut().for_each(|v| *v = *v / m);
            let mom = E::from_f64_lossy(spec.momentum);
            let keep = E::one() - mom;
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = keep * *rm + mom * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = keep * *rv + mom * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut out = vec![E::zero(); xd.len()];
    let tasks: Vec<_> = out.chunks_mut(c * l).enumerate().collect();
    parallel_tasks(tasks, |(b, ob)| {
        for ch in 0..c {
            let off = (b * c + ch) * l;
            let scale = gd[ch] * inv_std[ch];
            let shift = bd[ch] - mean[ch] * scale;
            for (o, &v) in ob[ch * l..(ch + 1) * l].iter_mut().zip(&xd[off..off + l]) {
                *o = v * scale + shift;
            }
        }
    });
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    Ok(tape.push(
        out,
        &[x, gamma, beta],
        BatchNormBackward {
            mean,
            inv_std,
            batch_stats: mode == Mode::Train,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, mode: Mode, stats: &mut RunningStats<f64>, spec: BatchNormSpec) -> Tensor<f64> {
        let c = x.shape()[1];
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let g = tape.leaf(Tensor::ones([c]), false);
        let b = tape.leaf(Tensor::zeros([c]), false);
        let y = batch_norm(&mut tape, xv, g, b, stats, mode, spec).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn train_two_values_gives_unit_spread() {
        let x = Tensor::new([2, 1], vec![1.0, 3.0]).unwrap();
        let spec = BatchNormSpec { momentum: 0.1, eps: 0.0 };
        let y = run(x, Mode::Train, &mut RunningStats::new(1), spec);
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let x = Tensor::new([1, 2, 1, 2], vec![0.5, -1.0, 2.0, 4.0]).unwrap();
        let y = run(x.clone(), Mode::Eval, &mut RunningStats::new(2), BatchNormSpec::default());
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn train_normalizes_each_channel() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([4, 3, 2, 2], 3.0, &mut rng);
        let y = run(x, Mode::Train, &mut RunningStats::new(3), BatchNormSpec::default());
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + ch) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn momentum_one_train_then_eval_agree() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([3, 2, 3, 3], 2.0, &mut rng);
        let spec = BatchNormSpec { momentum: 1.0, eps: 1e-5 };
        let mut stats = RunningStats::new(2);
        let train = run(x.clone(), Mode::Train, &mut stats, spec);
        let eval = run(x, Mode::Eval, &mut stats, spec);
        assert!(train.max_abs_diff(&eval).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2, 3]), false);
        let g = tape.leaf(Tensor::ones([2]), false);
        let b = tape.leaf(Tensor::zeros([2]), false);
        let err = batch_norm(&mut tape, x, g, b, &mut RunningStats::new(2), Mode::Train, BatchNormSpec::default());
        assert!(matches!(err, Err(crate::Error::Dimension(_))));
    }
}
