use rand::Rng;

use crate::autograd::{Backward, Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::graph::Mode;
use crate::tensor::{Element, Tensor};

struct ReluBackward;

impl<E: Element> Backward<E> for ReluBackward {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], y: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let dx = dy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
            .collect();
        Ok(vec![Some(Tensor::new(dy.shape().to_vec(), dx)?)])
    }
}

pub fn relu<E: Element>(tape: &mut Tape<E>, x: Var) -> Var {
    let out = tape.value(x).map(|v| v.max(E::zero()));
    tape.push(out, &[x], ReluBackward)
}

struct SigmoidBackward;

impl<E: Element> Backward<E> for SigmoidBackward {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], y: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let dx = dy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &s)| g * s * (E::one() - s))
            .collect();
        Ok(vec![Some(Tensor::new(dy.shape().to_vec(), dx)?)])
    }
}

pub fn sigmoid<E: Element>(tape: &mut Tape<E>, x: Var) -> Var {
    let out = tape.value(x).map(|v| E::one() / (E::one() + (-v).exp()));
    tape.push(out, &[x], SigmoidBackward)
}

struct AddBackward;

impl<E: Element> Backward<E> for AddBackward {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], _: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(needs.iter().map(|&n| n.then(|| dy.clone())).collect())
    }
}

/// Elementwise sum of equally-shaped tensors.
pub fn add<E: Element>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    let mut out = tape.value(a).clone();
    out.add_assign(tape.value(b))?;
    Ok(tape.push(out, &[a, b], AddBackward))
}

struct ScaleChannelsBackward;

impl<E: Element> Backward<E> for ScaleChannelsBackward {
    fn backward(
        &self,
        dy: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, s) = (inputs[0], inputs[1]);
        let (_, _, h, w) = x.dims4()?;
        let plane = h * w;
        let dx = needs[0].then(|| {
            let mut dx = dy.data().to_vec();
            for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                let sv = s.data()[i];
                chunk.iter_mut().for_each(|v| *v *= sv);
            }
            Tensor::new(x.shape().to_vec(), dx)
        });
        let ds = needs[1].then(|| {
            let ds = dy
                .data()
                .chunks(plane)
                .zip(x.data().chunks(plane))
                .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum())
                .collect();
            Tensor::new(s.shape().to_vec(), ds)
        });
        Ok(vec![dx.transpose()?, ds.transpose()?])
    }
}

/// Multiplies each `(n, c)` plane of `x (N,C,H,W)` by `scale[n, c]`.
pub fn scale_channels<E: Element>(tape: &mut Tape<E>, x: Var, scale: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if tape.shape(scale) != [n, c] {
        return Err(dim_err!(
            "scale_channels needs scale ({n},{c}), got {:?}",
            tape.shape(scale)
        ));
    }
    let mut out = tape.value(x).clone();
    let sd = tape.value(scale).data().to_vec();
    for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= sd[i]);
    }
    Ok(tape.push(out, &[x, scale], ScaleChannelsBackward))
}

struct MaskBackward<E> {
    mask: Vec<E>,
}

impl<E: Element> Backward<E> for MaskBackward<E> {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], _: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let dx = dy.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        Ok(vec![Some(Tensor::new(dy.shape().to_vec(), dx)?)])
    }
}

/// Inverted dropout: in train mode each unit is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`. Eval mode returns `x` itself.
pub fn dropout<E: Element, R: Rng + ?Sized>(
    tape: &mut Tape<E>,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!("dropout probability must lie in [0, 1), got {p}"));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = E::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<E> = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < p { E::zero() } else { keep })
        .collect();
    let xv = tape.value(x);
    let out = Tensor::new(
        xv.shape().to_vec(),
        xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
    )?;
    Ok(tape.push(out, &[x], MaskBackward { mask }))
}

struct WeightedSumBackward<E: Element> {
    weights: Tensor<E>,
}

impl<E: Element> Backward<E> for WeightedSumBackward<E> {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], _: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let g = dy.item()?;
        Ok(vec![Some(self.weights.map(|w| w * g))])
    }
}

/// Scalar `sum(x * weights)` for a constant `weights` tensor.
pub fn weighted_sum<E: Element>(tape: &mut Tape<E>, x: Var, weights: Tensor<E>) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape() != weights.shape() {
        return Err(dim_err!("weighted_sum: {:?} vs {:?}", xv.shape(), weights.shape()));
    }
    let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
    Ok(tape.push(Tensor::scalar(s), &[x], WeightedSumBackward { weights }))
}

/// Scalar sum of all elements.
pub fn sum<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let ones = Tensor::ones(tape.shape(x).to_vec());
    weighted_sum(tape, x, ones)
}
