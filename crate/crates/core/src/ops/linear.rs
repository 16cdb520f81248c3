use crate::autograd::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Raw affine map `x (N x D) * weight (D x K) + bias (K)`.
pub fn linear_forward<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let (n, d) = x.dims2()?;
    let (dw, k) = weight.dims2()?;
    if d != dw {
        return Err(dim_err!(
            "linear: input has {d} features but weight is {dw}x{k}"
        ));
    }
    let mut out = vec![E::zero(); n * k];
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(dim_err!("linear bias must be ({k},), got {:?}", b.shape()));
        }
        for row in out.chunks_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        MatRef::new(x.data(), n, d),
        MatRef::new(weight.data(), d, k),
        &mut out,
        bias.is_some(),
    );
    Tensor::new([n, k], out)
}

struct LinearBackward {
    has_bias: bool,
}

impl<E: Element> Backward<E> for LinearBackward {
    fn backward(
        &self,
        dy: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, d) = x.dims2()?;
        let k = w.shape()[1];
        let dx = needs[0].then(|| {
            let mut dx = vec![E::zero(); n * d];
            gemm(MatRef::new(dy.data(), n, k), MatRef::t(w.data(), k, d), &mut dx, false);
            Tensor::new([n, d], dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![E::zero(); d * k];
            gemm(MatRef::t(x.data(), d, n), MatRef::new(dy.data(), n, k), &mut dw, false);
            Tensor::new([d, k], dw)
        });
        let mut grads = vec![dx.transpose()?, dw.transpose()?];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut db = vec![E::zero(); k];
                for row in dy.data().chunks(k) {
                    for (a, &g) in db.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                Tensor::new([k], db)
            });
            grads.push(db.transpose()?);
        }
        Ok(grads)
    }
}

/// Fully connected layer `x W + b`.
pub fn linear<E: Element>(tape: &mut Tape<E>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let out = linear_forward(tape.value(x), tape.value(weight), bias.map(|b| tape.value(b)))?;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(tape.push(out, &parents, LinearBackward { has_bias: bias.is_some() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_affine() {
        let x = Tensor::new([1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, Some(&b)).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(linear_forward(&x, &w, None).unwrap(), x);
    }

    #[test]
    fn classifier_shape_contract() {
        let x = Tensor::<f32>::zeros([8, 1216]);
        let w = Tensor::<f32>::zeros([1216, 384]);
        assert_eq!(linear_forward(&x, &w, None).unwrap().shape(), &[8, 384]);
        let bad = Tensor::<f32>::zeros([1000, 384]);
        assert!(matches!(linear_forward(&x, &bad, None), Err(crate::Error::Dimension(_))));
    }
}
