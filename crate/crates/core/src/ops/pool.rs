use crate::autograd::{Backward, Tape, Var};
use crate::error::{config_err, Result};
use crate::tensor::{sum_lanes, Element, Tensor};

struct AvgPoolBackward;

impl<E: Element> Backward<E> for AvgPoolBackward {
    fn backward(&self, dy: &Tensor<E>, inputs: &[&Tensor<E>], _: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let x = inputs[0];
        let (_, _, h, w) = x.dims4()?;
        let plane = h * w;
        let inv = E::one() / E::from_usize(plane).unwrap();
        let mut dx = vec![E::zero(); x.len()];
        for (chunk, &g) in dx.chunks_mut(plane).zip(dy.data()) {
            chunk.fill(g * inv);
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

/// Mean over each channel plane: `(N,C,H,W) -> (N,C)`.
pub fn global_avg_pool<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    let plane = h * w;
    let inv = E::one() / E::from_usize(plane).unwrap();
    let out: Vec<E> = tape
        .value(x)
        .data()
        .chunks(plane)
        .map(|p| sum_lanes(p) * inv)
        .collect();
    Ok(tape.push(Tensor::new([n, c], out)?, &[x], AvgPoolBackward))
}

struct MaxPoolBackward {
    argmax: Vec<u32>,
}

impl<E: Element> Backward<E> for MaxPoolBackward {
    fn backward(&self, dy: &Tensor<E>, inputs: &[&Tensor<E>], out: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let x = inputs[0];
        let (_, _, h, w) = x.dims4()?;
        let (_, _, ho, wo) = out.dims4()?;
        let mut dx = vec![E::zero(); x.len()];
        for (nc, (gplane, aplane)) in dy
            .data()
            .chunks(ho * wo)
            .zip(self.argmax.chunks(ho * wo))
            .enumerate()
        {
            let base = nc * h * w;
            for (&g, &a) in gplane.iter().zip(aplane) {
                dx[base + a as usize] += g;
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

/// Max pooling with square window; padded positions never win.
pub fn max_pool2d<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    if kernel == 0 || stride == 0 || padding >= kernel {
        return Err(config_err!(
            "max_pool2d needs kernel > padding and positive stride (kernel={kernel}, stride={stride}, padding={padding})"
        ));
    }
    let (n, c, h, w) = tape.value(x).dims4()?;
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let xd = tape.value(x).data();
    let mut out = vec![E::zero(); n * c * ho * wo];
    let mut argmax = vec![0u32; out.len()];
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            let y0 = (oy * stride).saturating_sub(padding);
            let y1 = (oy * stride + kernel - padding).min(h);
            for ox in 0..wo {
                let x0 = (ox * stride).saturating_sub(padding);
                let x1 = (ox * stride + kernel - padding).min(w);
                let mut best = y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        if src[iy * w + ix] > src[best] {
                            best = iy * w + ix;
                        }
                    }
                }
                let o = nc * ho * wo + oy * wo + ox;
                out[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok(tape.push(Tensor::new([n, c, ho, wo], out)?, &[x], MaxPoolBackward { argmax }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_avg_pool_hand_mean() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::new([1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 2.0, 0.0]).unwrap(),
            false,
        );
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn max_pool_stem_geometry() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn([1, 1, 112, 112], |i| i as f32), false);
        let y = max_pool2d(&mut tape, x, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 56, 56]);
        // bottom-right window covers rows/cols 109..=111
        assert_eq!(*tape.value(y).data().last().unwrap(), (112 * 112 - 1) as f32);
    }
}
