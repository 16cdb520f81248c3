use crate::autograd::{Backward, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Row-wise softmax of an `rows x cols` slice, in place.
pub(crate) fn softmax_rows<E: Element>(data: &mut [E], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut total = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = E::one() / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Token extents of a `(N, C, H, W)` head input.
fn tokens(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(dim_err!("attention expects (N, C, H, W), got {:?}", shape)),
    }
}

fn check_inputs(q: &[usize], k: &[usize], v: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, usize, usize)> {
    let (n, kd, l) = tokens(q)?;
    let (nk, kdk, lk) = tokens(k)?;
    let (nv, dv, lv) = tokens(v)?;
    if (nk, kdk, lk) != (n, kd, l) || nv != n || lv != l || v[2..] != q[2..] {
        return Err(dim_err!(
            "attention inputs disagree: q {:?}, k {:?}, v {:?}",
            q,
            k,
            v
        ));
    }
    if let Some(b) = bias {
        if b != [l, l] {
            return Err(dim_err!("attention bias must be ({l},{l}), got {:?}", b));
        }
    }
    Ok((n, kd, dv, l))
}

/// Attention probabilities `softmax(scale * q^T k + bias)` per sample:
/// returns an `(N, L, L)` tensor whose rows sum to one.
pub fn attention_weights<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    scale: f64,
) -> Result<Tensor<E>> {
    let (n, kd, l) = tokens(q.shape())?;
    if k.shape() != q.shape() {
        return Err(dim_err!("attention q {:?} vs k {:?}", q.shape(), k.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [l, l] {
            return Err(dim_err!("attention bias must be ({l},{l}), got {:?}", b.shape()));
        }
    }
    let scale = E::from_f64_lossy(scale);
    let mut probs = vec![E::zero(); n * l * l];
    for b in 0..n {
        let qs = &q.data()[b * kd * l..(b + 1) * kd * l];
        let ks = &k.data()[b * kd * l..(b + 1) * kd * l];
        let ps = &mut probs[b * l * l..(b + 1) * l * l];
        gemm(MatRef::t(qs, l, kd), MatRef::new(ks, kd, l), ps, false);
        match bias {
            Some(bias) => ps
                .iter_mut()
                .zip(bias.data())
                .for_each(|(p, &bv)| *p = *p * scale + bv),
            None => ps.iter_mut().for_each(|p| *p *= scale),
        }
        softmax_rows(ps, l);
    }
    Tensor::new([n, l, l], probs)
}

struct AttentionBackward<E: Element> {
    probs: Tensor<E>,
    scale: f64,
    has_bias: bool,
}

impl<E: Element> Backward<E> for AttentionBackward<E> {
    fn backward(
        &self,
        dy: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, kd, dv, l) = check_inputs(q.shape(), k.shape(), v.shape(), None)?;
        let scale = E::from_f64_lossy(self.scale);
        let mut dq = needs[0].then(|| vec![E::zero(); q.len()]);
        let mut dk = needs[1].then(|| vec![E::zero(); k.len()]);
        let mut dv_ = needs[2].then(|| vec![E::zero(); v.len()]);
        let need_bias = self.has_bias && needs[3];
        let mut dbias = need_bias.then(|| vec![E::zero(); l * l]);
        let need_scores = needs[0] || needs[1] || need_bias;
        let mut ds = vec![E::zero(); l * l];

        for b in 0..n {
            let p = &self.probs.data()[b * l * l..(b + 1) * l * l];
            let g = &dy.data()[b * dv * l..(b + 1) * dv * l];
            let vs = &v.data()[b * dv * l..(b + 1) * dv * l];
            // out = v p^T  =>  dv = g p,  dp = g^T v
            if let Some(dv_) = dv_.as_deref_mut() {
                gemm(MatRef::new(g, dv, l), MatRef::new(p, l, l), &mut dv_[b * dv * l..(b + 1) * dv * l], false);
            }
            if !need_scores {
                continue;
            }
            gemm(MatRef::t(g, l, dv), MatRef::new(vs, dv, l), &mut ds, false);
            // softmax adjoint, row by row
            for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot: E = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(db) = dbias.as_deref_mut() {
                db.iter_mut().zip(&ds).for_each(|(a, &b)| *a += b);
            }
            // scores = scale q^T k  =>  dq = scale k ds^T,  dk = scale q ds
            ds.iter_mut().for_each(|d| *d *= scale);
            let qs = &q.data()[b * kd * l..(b + 1) * kd * l];
            let ks = &k.data()[b * kd * l..(b + 1) * kd * l];
            if let Some(dq) = dq.as_deref_mut() {
                gemm(MatRef::new(ks, kd, l), MatRef::t(&ds, l, l), &mut dq[b * kd * l..(b + 1) * kd * l], false);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(MatRef::new(qs, kd, l), MatRef::new(&ds, l, l), &mut dk[b * kd * l..(b + 1) * kd * l], false);
            }
        }
        let mut grads = vec![
            dq.map(|d| Tensor::new(q.shape().to_vec(), d)).transpose()?,
            dk.map(|d| Tensor::new(k.shape().to_vec(), d)).transpose()?,
            dv_.map(|d| Tensor::new(v.shape().to_vec(), d)).transpose()?,
        ];
        if self.has_bias {
            grads.push(dbias.map(|d| Tensor::new([l, l], d)).transpose()?);
        }
        Ok(grads)
    }
}

/// Single-head scaled dot-product attention over spatial tokens.
///
/// `q`, `k` are `(N, kd, H, W)`, `v` is `(N, dv, H, W)`; tokens are the `H*W`
/// positions. Output is `v * softmax(scale * q^T k + bias)^T`, shaped like `v`.
pub fn attention<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    scale: f64,
) -> Result<Var> {
    let (n, _, dv, l) = check_inputs(tape.shape(q), tape.shape(k), tape.shape(v), bias.map(|b| tape.shape(b)))?;
    let probs = attention_weights(tape.value(q), tape.value(k), bias.map(|b| tape.value(b)), scale)?;
    let mut out = vec![E::zero(); n * dv * l];
    let vd = tape.value(v).data();
    for b in 0..n {
        gemm(
            MatRef::new(&vd[b * dv * l..(b + 1) * dv * l], dv, l),
            MatRef::t(&probs.data()[b * l * l..(b + 1) * l * l], l, l),
            &mut out[b * dv * l..(b + 1) * dv * l],
            false,
        );
    }
    let out = Tensor::new(tape.shape(v).to_vec(), out)?;
    let mut parents = vec![q, k, v];
    parents.extend(bias);
    Ok(tape.push(
        out,
        &parents,
        AttentionBackward {
            probs,
            scale,
            has_bias: bias.is_some(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f32>::randn([2, 16, 4, 4], 3.0, &mut rng);
        let k = Tensor::<f32>::randn([2, 16, 4, 4], 3.0, &mut rng);
        let bias = Tensor::<f32>::randn([16, 16], 1.0, &mut rng);
        let p = attention_weights(&q, &k, Some(&bias), 0.25).unwrap();
        for row in p.data().chunks(16) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn single_token_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::new([1, 2, 1, 1], vec![0.3, -0.7]).unwrap(), false);
        let k = tape.leaf(Tensor::new([1, 2, 1, 1], vec![1.5, 2.0]).unwrap(), false);
        let v = tape.leaf(Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let y = attention(&mut tape, q, k, v, None, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }
}
