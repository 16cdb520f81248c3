use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::preprocess::chw;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Training-time augmentation. Each transform has its own switch and all
/// magnitudes are configurable; out-of-range values are clamped when applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub horizontal_flip: bool,
    pub flip_probability: f64,
    pub rotation: bool,
    pub max_rotation_deg: f64,
    pub color_jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub affine: bool,
    /// Largest shift as a fraction of the image side.
    pub max_translate: f64,
    pub scale_range: [f64; 2],
    pub gaussian_blur: bool,
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            flip_probability: 0.5,
            rotation: true,
            max_rotation_deg: 10.0,
            color_jitter: true,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            affine: true,
            max_translate: 0.05,
            scale_range: [0.95, 1.05],
            gaussian_blur: true,
            blur_kernel: 3,
            blur_sigma: [0.1, 1.0],
        }
    }
}

impl AugmentPolicy {
    /// Every transform switched off.
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            rotation: false,
            color_jitter: false,
            affine: false,
            gaussian_blur: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.horizontal_flip || self.rotation || self.color_jitter || self.affine || self.gaussian_blur)
    }
}

/// Mirrors every row of a `(C, H, W)` image.
pub fn hflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = chw(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Samples `(C, H, W)` at real coordinates with bilinear weights; points
/// outside the image read 0.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1.0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Rotation by `angle_deg` (counter-clockwise) and scaling about the image
/// center, then a shift by `(tx, ty)` pixels. Uncovered pixels become 0.
pub fn warp_affine(img: &Tensor<f32>, angle_deg: f64, scale: f64, tx: f64, ty: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(img)?;
    if !(scale > 0.0) {
        return Err(dim_err!("affine scale must be positive, got {scale}"));
    }
    if angle_deg == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                // inverse map: undo the shift, then the rotation/scale
                let (dx, dy) = (ox as f64 - cx - tx, oy as f64 - cy - ty);
                let sx = (cos * dx - sin * dy) / scale + cx;
                let sy = (sin * dx + cos * dy) / scale + cy;
                dst[oy * w + ox] = sample_bilinear(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::new([c, h, w], out)
}

pub fn rotate(img: &Tensor<f32>, angle_deg: f64) -> Result<Tensor<f32>> {
    warp_affine(img, angle_deg, 1.0, 0.0, 0.0)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast and saturation factors (1 = unchanged), applied in
/// that order with clamping to `[0, 1]` after each step.
pub fn color_jitter(img: &Tensor<f32>, brightness: f32, contrast: f32, saturation: f32) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(img)?;
    if c != 3 {
        return Err(dim_err!("color jitter needs 3 channels, got {c}"));
    }
    let n = h * w;
    let mut d = img.data().to_vec();
    if brightness != 1.0 {
        d.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i])).sum::<f32>() / n as f32;
        d.iter_mut().for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 {
        for i in 0..n {
            let g = luma(d[i], d[n + i], d[2 * n + i]);
            for ch in 0..3 {
                let v = &mut d[ch * n + i];
                *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([c, h, w], d)
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Tensor<f32>, kernel: usize, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(img)?;
    let kernel = if kernel % 2 == 0 { kernel + 1 } else { kernel.max(1) };
    let r = (kernel / 2) as isize;
    let sigma = sigma.max(1e-3);
    let mut k: Vec<f32> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let src = img.data();
    let mut mid = vec![0.0f32; src.len()];
    for p in 0..c * h {
        let row = &src[p * w..(p + 1) * w];
        for x in 0..w {
            mid[p * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * row[reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * mid[(ch * h + reflect(y as isize + j as isize - r, h)) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new([c, h, w], out)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Applies the enabled transforms in a fixed order (flip, rotation, affine,
/// color jitter, blur) to a `(3, H, W)` image in `[0, 1]`. Shape and value
/// range are preserved.
pub fn augment_image<R: Rng + ?Sized>(img: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(img)?;
    let mut out = img.clone();
    if policy.horizontal_flip && rng.gen_bool(policy.flip_probability.clamp(0.0, 1.0)) {
        out = hflip(&out)?;
    }
    if policy.rotation {
        let m = policy.max_rotation_deg.abs().min(180.0);
        out = rotate(&out, uniform(rng, -m, m))?;
    }
    if policy.affine {
        let t = policy.max_translate.abs().min(0.5);
        let tx = uniform(rng, -t, t) * w as f64;
        let ty = uniform(rng, -t, t) * h as f64;
        let lo = policy.scale_range[0].max(0.1);
        let hi = policy.scale_range[1].max(lo);
        out = warp_affine(&out, 0.0, uniform(rng, lo, hi), tx, ty)?;
    }
    if policy.color_jitter {
        let factor = |rng: &mut R, s: f64| uniform(rng, (1.0 - s.abs()).max(0.0), 1.0 + s.abs()) as f32;
        let b = factor(rng, policy.brightness);
        let c = factor(rng, policy.contrast);
        let s = factor(rng, policy.saturation);
        out = color_jitter(&out, b, c, s)?;
    }
    if policy.gaussian_blur {
        let lo = policy.blur_sigma[0].max(1e-3);
        let hi = policy.blur_sigma[1].max(lo);
        out = gaussian_blur(&out, policy.blur_kernel, uniform(rng, lo, hi))?;
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// [`augment_image`] on a sample; label and metadata are kept.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, policy: &AugmentPolicy, rng: &mut R) -> Result<Sample> {
    Ok(Sample {
        image: augment_image(&sample.image, policy, rng)?,
        ..sample.clone()
    })
}
