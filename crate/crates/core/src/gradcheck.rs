//! Central finite-difference gradient checks in double precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::weighted_sum;
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`]: one relative error per checked input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` with Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (norm(analytic) + norm(numeric)).max(1e-12)
}

/// Compares the tape gradients of `f` against central differences with step
/// `eps`. `f` maps leaf variables (one per entry of `inputs`) to any output;
/// the output is reduced to a scalar with fixed random weights so every
/// output element contributes. Inputs listed in `skip` are left unchecked
/// (labels, masks, or values held constant).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], skip: &[usize], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), grad && !skip.contains(&i)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
            Tensor::uniform(tape.shape(out).to_vec(), 1.0, &mut rng)
        });
        let y = weighted_sum(&mut tape, out, w.clone())?;
        let value = tape.value(y).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(y)?;
        Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut values = inputs.to_vec();
    let mut rel_errors = Vec::new();
    for i in 0..inputs.len() {
        if skip.contains(&i) {
            continue;
        }
        let a = analytic[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            values[i].data_mut()[j] = x + eps;
            let (plus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = x - eps;
            let (minus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = x;
            numeric[j] = (plus - minus) / (2.0 * eps);
        }
        let err = relative_error(a.data(), &numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of input {i}")));
        }
        rel_errors.push(err);
    }
    Ok(GradCheck { rel_errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::relu;

    #[test]
    fn identical_vectors_have_zero_error() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_passes() {
        let x = Tensor::new([6], vec![-1.5, -0.3, 0.2, 0.7, 1.1, -2.0]).unwrap();
        let r = check_gradients(&[x], &[], 1e-6, |t, v| Ok(relu(t, v[0]))).unwrap();
        assert!(r.passes(1e-8), "{:?}", r);
    }
}
