use crate::autograd::{Backward, Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Element, Tensor};

/// `(N, C, inner)` view where `inner` is the product of trailing axes.
fn split_axis1(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("expected at least (N, C), got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

struct ConcatBackward {
    widths: Vec<usize>,
}

impl<E: Element> Backward<E> for ConcatBackward {
    fn backward(&self, dy: &Tensor<E>, inputs: &[&Tensor<E>], _: &Tensor<E>, needs: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (n, c, inner) = split_axis1(dy.shape())?;
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for ((input, &width), &need) in inputs.iter().zip(&self.widths).zip(needs) {
            if need {
                grads.push(Some(narrow_tensor(dy, start, width, n, c, inner, input.shape())?));
            } else {
                grads.push(None);
            }
            start += width;
        }
        Ok(grads)
    }
}

fn narrow_tensor<E: Element>(
    x: &Tensor<E>,
    start: usize,
    width: usize,
    n: usize,
    c: usize,
    inner: usize,
    shape: &[usize],
) -> Result<Tensor<E>> {
    let mut out = Vec::with_capacity(n * width * inner);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * inner..(b * c + start + width) * inner]);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Concatenation along the channel axis (axis 1); all other extents must match.
pub fn concat<E: Element>(tape: &mut Tape<E>, parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let ref_shape = tape.shape(*first).to_vec();
    let (n, _, inner) = split_axis1(&ref_shape)?;
    let mut widths = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = tape.shape(p);
        if s.len() != ref_shape.len() || s[0] != ref_shape[0] || s[2..] != ref_shape[2..] {
            return Err(dim_err!("concat: {:?} is incompatible with {:?}", s, ref_shape));
        }
        widths.push(s[1]);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total * inner);
    for b in 0..n {
        for (&p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&tape.value(p).data()[b * w * inner..(b + 1) * w * inner]);
        }
    }
    let mut shape = ref_shape;
    shape[1] = total;
    let out = Tensor::new(shape, out)?;
    Ok(tape.push(out, parts, ConcatBackward { widths }))
}

struct NarrowBackward {
    start: usize,
}

impl<E: Element> Backward<E> for NarrowBackward {
    fn backward(&self, dy: &Tensor<E>, inputs: &[&Tensor<E>], _: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let x = inputs[0];
        let (n, c, inner) = split_axis1(x.shape())?;
        let width = dy.shape()[1];
        let mut dx = vec![E::zero(); x.len()];
        for b in 0..n {
            dx[(b * c + self.start) * inner..(b * c + self.start + width) * inner]
                .copy_from_slice(&dy.data()[b * width * inner..(b + 1) * width * inner]);
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

/// Channels `start..start + width` of `x`.
pub fn narrow<E: Element>(tape: &mut Tape<E>, x: Var, start: usize, width: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, c, inner) = split_axis1(&shape)?;
    if start + width > c {
        return Err(dim_err!("narrow {}..{} exceeds {} channels", start, start + width, c));
    }
    let mut out_shape = shape;
    out_shape[1] = width;
    let out = narrow_tensor(tape.value(x), start, width, n, c, inner, &out_shape)?;
    Ok(tape.push(out, &[x], NarrowBackward { start }))
}

/// Splits channels into `parts` equal chunks.
pub fn chunk<E: Element>(tape: &mut Tape<E>, x: Var, parts: usize) -> Result<Vec<Var>> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if parts == 0 || c % parts != 0 {
        return Err(config_err!("cannot split {c} channels into {parts} equal chunks"));
    }
    let w = c / parts;
    (0..parts).map(|i| narrow(tape, x, i * w, w)).collect()
}

/// Permutes `x (N, C, ...)` along the channel axis so that output channel
/// `j * groups + i` reads input channel `i * (C / groups) + j`
/// (reshape to `(groups, C/groups)`, transpose, flatten).
pub fn channel_shuffle_tensor<E: Element>(x: &Tensor<E>, groups: usize) -> Result<Tensor<E>> {
    let (n, c, inner) = split_axis1(x.shape())?;
    if groups == 0 || c % groups != 0 {
        return Err(config_err!("channel_shuffle: {c} channels not divisible into {groups} groups"));
    }
    let per = c / groups;
    let mut out = vec![E::zero(); x.len()];
    for b in 0..n {
        for i in 0..groups {
            for j in 0..per {
                let src = (b * c + i * per + j) * inner;
                let dst = (b * c + j * groups + i) * inner;
                out[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

struct ShuffleBackward {
    groups: usize,
}

impl<E: Element> Backward<E> for ShuffleBackward {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], _: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        // the inverse of shuffling with g groups is shuffling with C/g groups
        let c = dy.shape()[1];
        Ok(vec![Some(channel_shuffle_tensor(dy, c / self.groups)?)])
    }
}

pub fn channel_shuffle<E: Element>(tape: &mut Tape<E>, x: Var, groups: usize) -> Result<Var> {
    let out = channel_shuffle_tensor(tape.value(x), groups)?;
    Ok(tape.push(out, &[x], ShuffleBackward { groups }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_four_channels_two_groups() {
        // channels a, b, c, d encoded as 0, 1, 2, 3
        let x = Tensor::new([1, 4, 1, 1], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let y = channel_shuffle_tensor(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 1.0, 3.0]);
        assert_eq!(channel_shuffle_tensor(&x, 1).unwrap(), x);
        assert!(matches!(channel_shuffle_tensor(&x, 3), Err(crate::Error::Config(_))));
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn([2, 2, 3], |i| i as f32), false);
        let b = tape.leaf(Tensor::from_fn([2, 1, 3], |i| 100.0 + i as f32), false);
        let z = concat(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(z), &[2, 3, 3]);
        let a2 = narrow(&mut tape, z, 0, 2).unwrap();
        let b2 = narrow(&mut tape, z, 2, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }
}
