use crate::autograd::{Backward, Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::runtime::parallel_tasks;
use crate::tensor::{dot_lanes, gemm, sum_lanes, Element, MatRef, Tensor};

/// Stride, zero padding and grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
}

fn geometry(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    let [n, cin, h, wd] = x[..] else {
        return Err(dim_err!("conv2d input must be NCHW, got {:?}", x));
    };
    let [cout, cin_g, kh, kw] = w[..] else {
        return Err(dim_err!("conv2d weight must be (out, in/groups, kh, kw), got {:?}", w));
    };
    if spec.groups == 0 || spec.stride == 0 {
        return Err(config_err!("conv2d groups and stride must be positive"));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(config_err!(
            "conv2d groups={} must divide in_channels={} and out_channels={}",
            spec.groups,
            cin,
            cout
        ));
    }
    if cin_g != cin / spec.groups {
        return Err(dim_err!(
            "conv2d weight expects {} input channels per group, input has {} channels in {} groups",
            cin_g,
            cin,
            spec.groups
        ));
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return Err(dim_err!(
            "conv2d kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * spec.padding,
            wd + 2 * spec.padding
        ));
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
        wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
        stride: spec.stride,
        pad: spec.padding,
        groups: spec.groups,
    })
}

/// Output index range `[lo, hi)` along one axis for which input
/// `o * stride + k - pad` stays inside `0..size`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= size - 1
    let hi = if size + pad > k {
        ((size + pad - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one group of one sample into a `(cin_g*kh*kw) x (ho*wo)` matrix.
fn im2col<E: Element>(g: &Geometry, x: &[E], col: &mut [E]) {
    let plane = g.out_plane();
    for c in 0..g.cin_g() {
        let src = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst.fill(E::zero());
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let off = ox0 + kx - g.pad;
                        drow[ox0..ox1].copy_from_slice(&srow[off..off + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an input plane set.
fn col2im<E: Element>(g: &Geometry, col: &[E], dx: &mut [E]) {
    let plane = g.out_plane();
    for c in 0..g.cin_g() {
        let dst = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                if ox0 == ox1 {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Depthwise convolution of one sample: `x` and `out` hold `cin` planes.
fn depthwise_forward<E: Element>(g: &Geometry, x: &[E], w: &[E], out: &mut [E]) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    for c in 0..g.cin {
        let src = &x[c * ip..(c + 1) * ip];
        let dst = &mut out[c * op..(c + 1) * op];
        let wk = &w[c * kk..(c + 1) * kk];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                if ox0 == ox1 {
                    continue;
                }
                let wv = wk[ky * g.kw + kx];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let off = kx as isize - g.pad as isize;
                        let s = &srow[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
                        for (d, &v) in drow[ox0..ox1].iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] += wv * srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise gradients of one sample; `dw` accumulates.
fn depthwise_backward<E: Element>(
    g: &Geometry,
    x: &[E],
    w: &[E],
    dy: &[E],
    mut dx: Option<&mut [E]>,
    mut dw: Option<&mut [E]>,
) {
    let (ip, op, kk) = (g.in_plane(), g.out_plane(), g.kh * g.kw);
    for c in 0..g.cin {
        let src = &x[c * ip..(c + 1) * ip];
        let gout = &dy[c * op..(c + 1) * op];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                if ox0 == ox1 {
                    continue;
                }
                let widx = c * kk + ky * g.kw + kx;
                let wv = w[widx];
                let mut acc = E::zero();
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &gout[oy * g.wo + ox0..oy * g.wo + ox1];
                    if g.stride == 1 {
                        let lo = ox0 + kx - g.pad;
                        let hi = lo + (ox1 - ox0);
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[c * ip + iy * g.w..][lo..hi];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        if dw.is_some() {
                            let srow = &src[iy * g.w..][lo..hi];
                            acc += dot_lanes(grow, srow);
                        }
                    } else {
                        let base = iy * g.w + ox0 * g.stride + kx - g.pad;
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[c * ip..(c + 1) * ip];
                            for (i, &gv) in grow.iter().enumerate() {
                                drow[base + i * g.stride] += wv * gv;
                            }
                        }
                        if dw.is_some() {
                            for (i, &gv) in grow.iter().enumerate() {
                                acc += gv * src[base + i * g.stride];
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Grouped GEMM convolution of one sample.
fn forward_sample<E: Element>(g: &Geometry, x: &[E], w: &[E], out: &mut [E]) {
    let (cin_g, cout_g, rows, plane) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_plane());
    let mut col = if g.pointwise() { Vec::new() } else { vec![E::zero(); rows * plane] };
    for grp in 0..g.groups {
        let xs = &x[grp * cin_g * g.in_plane()..][..cin_g * g.in_plane()];
        let ws = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        let os = &mut out[grp * cout_g * plane..][..cout_g * plane];
        let b = if g.pointwise() {
            MatRef::new(xs, rows, plane)
        } else {
            im2col(g, xs, &mut col);
            MatRef::new(&col, rows, plane)
        };
        gemm(MatRef::new(ws, cout_g, rows), b, os, false);
    }
}

/// Grouped GEMM convolution gradients of one sample; `dw` accumulates.
fn backward_sample<E: Element>(g: &Geometry, x: &[E], w: &[E], dy: &[E], dx: Option<&mut [E]>, mut dw: Option<&mut [E]>) {
    let (cin_g, cout_g, rows, plane) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_plane());
    let mut col = if g.pointwise() { Vec::new() } else { vec![E::zero(); rows * plane] };
    let mut dx = dx;
    for grp in 0..g.groups {
        let xoff = grp * cin_g * g.in_plane();
        let xs = &x[xoff..xoff + cin_g * g.in_plane()];
        let ws = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        let gs = &dy[grp * cout_g * plane..][..cout_g * plane];
        if let Some(dw) = dw.as_deref_mut() {
            let dws = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let colref = if g.pointwise() {
                MatRef::t(xs, plane, rows)
            } else {
                im2col(g, xs, &mut col);
                MatRef::t(&col, plane, rows)
            };
            gemm(MatRef::new(gs, cout_g, plane), colref, dws, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[xoff..xoff + cin_g * g.in_plane()];
            if g.pointwise() {
                gemm(MatRef::t(ws, rows, cout_g), MatRef::new(gs, cout_g, plane), dxs, true);
            } else {
                gemm(MatRef::t(ws, rows, cout_g), MatRef::new(gs, cout_g, plane), &mut col, false);
                col2im(g, &col, dxs);
            }
        }
    }
}

/// Samples per weight-gradient partial sum. Fixed, so the summation order
/// (and therefore the result) does not depend on the thread count.
const SAMPLES_PER_PARTIAL: usize = 4;

/// Direct convolution on raw tensors (no tape).
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv2dSpec,
) -> Result<Tensor<E>> {
    let g = geometry(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(dim_err!("conv2d bias must be ({},), got {:?}", g.cout, b.shape()));
        }
    }
    let mut out = vec![E::zero(); g.n * g.cout * g.out_plane()];
    let (xd, wd) = (x.data(), weight.data());
    let (in_len, out_len) = (g.cin * g.in_plane(), g.cout * g.out_plane());
    let tasks: Vec<(usize, &mut [E])> = out.chunks_mut(out_len).enumerate().collect();
    parallel_tasks(tasks, |(n, os)| {
        let xs = &xd[n * in_len..(n + 1) * in_len];
        if g.depthwise() {
            depthwise_forward(&g, xs, wd, os);
        } else {
            forward_sample(&g, xs, wd, os);
        }
    });
    if let Some(b) = bias {
        let plane = g.out_plane();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % g.cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new([g.n, g.cout, g.ho, g.wo], out)
}

struct Conv2dBackward {
    spec: Conv2dSpec,
    has_bias: bool,
}

impl<E: Element> Backward<E> for Conv2dBackward {
    fn backward(
        &self,
        dy: &Tensor<E>,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = geometry(x.shape(), w.shape(), self.spec)?;
        let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
        let mut dx = needs[0].then(|| vec![E::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![E::zero(); w.len()]);

        let (in_len, out_len) = (g.cin * g.in_plane(), g.cout * g.out_plane());
        let chunks = g.n.div_ceil(SAMPLES_PER_PARTIAL);
        let mut partials: Vec<Vec<E>> = (0..chunks)
            .map(|_| if dw.is_some() { vec![E::zero(); w.len()] } else { Vec::new() })
            .collect();
        let mut dx_chunks: Vec<Option<&mut [E]>> = match dx.as_deref_mut() {
            Some(d) => d.chunks_mut(SAMPLES_PER_PARTIAL * in_len).map(Some).collect(),
            None => (0..chunks).map(|_| None).collect(),
        };
        let tasks: Vec<_> = dx_chunks.iter_mut().zip(partials.iter_mut()).enumerate().collect();
        parallel_tasks(tasks, |(chunk, (dxc, part))| {
            let first = chunk * SAMPLES_PER_PARTIAL;
            for n in first..(first + SAMPLES_PER_PARTIAL).min(g.n) {
                let xs = &xd[n * in_len..(n + 1) * in_len];
                let gs = &dyd[n * out_len..(n + 1) * out_len];
                let dxs = dxc.as_deref_mut().map(|d| &mut d[(n - first) * in_len..(n - first + 1) * in_len]);
                let dws = (!part.is_empty()).then_some(part.as_mut_slice());
                if g.depthwise() {
                    depthwise_backward(&g, xs, wd, gs, dxs, dws);
                } else {
                    backward_sample(&g, xs, wd, gs, dxs, dws);
                }
            }
        });
        if let Some(dw) = dw.as_deref_mut() {
            for part in &partials {
                dw.iter_mut().zip(part).for_each(|(d, &p)| *d += p);
            }
        }

        let mut grads = vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
            dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        ];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut db = vec![E::zero(); g.cout];
                for (i, chunk) in dyd.chunks(g.out_plane()).enumerate() {
                    db[i % g.cout] += sum_lanes(chunk);
                }
                Tensor::new([g.cout], db)
            });
            grads.push(db.transpose()?);
        }
        Ok(grads)
    }
}

/// 2-D convolution `x (N,Cin,H,W) * weight (Cout,Cin/groups,kH,kW) + bias`
/// with explicit zero padding.
pub fn conv2d<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: Conv2dSpec,
) -> Result<Var> {
    let out = conv2d_forward(tape.value(x), tape.value(weight), bias.map(|b| tape.value(b)), spec)?;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(tape.push(
        out,
        &parents,
        Conv2dBackward {
            spec,
            has_bias: bias.is_some(),
        },
    ))
}
