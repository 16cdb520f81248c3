use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization `(x - mean) / std` applied after scaling to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("normalization std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// `(H, W, 3)` 8-bit RGB to a `(3, H, W)` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("buffer sized from the image")
}

/// `(3, H, W)` tensor in `[0, 1]` to 8-bit RGB (rounded, clamped).
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let (c, h, w) = chw(t)?;
    if c != 3 {
        return Err(dim_err!("expected 3 channels, got {c}"));
    }
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub(crate) fn chw(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(dim_err!("expected a (C, H, W) image, got {:?}", s)),
    }
}

/// Decodes an image file to `(3, H, W)` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Decodes encoded image bytes to `(3, H, W)` in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Data(format!("cannot decode image: {e}")))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Filter taps `(first_index, weights)` for every output coordinate of a 1-D
/// triangle-filter resample. The filter widens by the scale factor when
/// shrinking (antialiasing) and reduces to plain linear interpolation with
/// half-pixel centers when enlarging. Equal sizes give the identity.
fn taps(input: usize, output: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = input as f64 / output as f64;
    let support = scale.max(1.0);
    (0..output)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(input);
            let mut w: Vec<f64> = (lo..hi)
                .map(|i| (1.0 - ((i as f64 + 0.5 - center) / support).abs()).max(0.0))
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                // center outside every tap: nearest edge pixel
                let nearest = (center.floor() as usize).min(input - 1);
                return (nearest, vec![1.0]);
            }
            // trim zero-weight ends so an equal-size resample copies exactly
            let first = w.iter().position(|&v| v > 0.0).unwrap_or(0);
            let last = w.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            (lo + first, w[first..=last].iter().map(|&v| v as f32).collect())
        })
        .collect()
}

/// Bilinear resize of a `(C, H, W)` image to `(C, out_h, out_w)`.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(img)?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(dim_err!("cannot resize {h}x{w} to {out_h}x{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let (tx, ty) = (taps(w, out_w), taps(h, out_h));
    let src = img.data();
    // horizontal pass, then vertical
    let mut mid = vec![0.0f32; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut mid[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (d, (first, wt)) in dst.iter_mut().zip(&tx) {
                *d = wt.iter().zip(&row[*first..]).map(|(a, b)| a * b).sum();
            }
        }
    }
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for (oy, (first, wt)) in ty.iter().enumerate() {
            let dst = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (k, &wv) in wt.iter().enumerate() {
                let srow = &mid[(ch * h + first + k) * out_w..(ch * h + first + k + 1) * out_w];
                for (d, &s) in dst.iter_mut().zip(srow) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Per-channel `(x - mean) / std` on a `(3, H, W)` image.
pub fn normalize(img: &Tensor<f32>, norm: &Normalization) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(img)?;
    if c != 3 {
        return Err(dim_err!("normalization expects 3 channels, got {c}"));
    }
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Square resize to `size` followed by normalization: the evaluation pipeline.
pub fn prepare(img: &Tensor<f32>, size: usize, norm: &Normalization) -> Result<Tensor<f32>> {
    normalize(&resize_bilinear(img, size, size)?, norm)
}

/// Encoded image bytes to a normalized `(3, size, size)` model input.
pub fn preprocess(bytes: &[u8], size: usize, norm: &Normalization) -> Result<Tensor<f32>> {
    prepare(&decode_image(bytes)?, size, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = Tensor::from_fn([3, 5, 4], |i| (i as f32 * 0.37).fract());
        assert_eq!(resize_bilinear(&img, 5, 4).unwrap(), img);
        // the tap construction itself is exact for equal sizes
        for (o, (first, w)) in taps(7, 7).into_iter().enumerate() {
            assert_eq!((first, w), (o, vec![1.0]));
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full([3, 13, 9], 0.25f32);
        let out = resize_bilinear(&img, 224, 224).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        let out = resize_bilinear(&img, 4, 3).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn constant_normalization_matches_formula() {
        let img = Tensor::full([3, 4, 4], 0.6f32);
        let norm = Normalization {
            mean: [0.5, 0.1, 0.6],
            std: [0.25, 0.5, 2.0],
        };
        let out = normalize(&img, &norm).unwrap();
        for (c, plane) in out.data().chunks(16).enumerate() {
            let want = (0.6 - norm.mean[c]) / norm.std[c];
            assert!(plane.iter().all(|&v| v == want));
        }
        assert_eq!(normalize(&img, &Normalization::identity()).unwrap(), img);
    }

    #[test]
    fn png_round_trip() {
        let img = Tensor::from_fn([3, 6, 5], |i| ((i * 7) % 256) as f32 / 255.0);
        let rgb = tensor_to_rgb(&img).unwrap();
        let mut bytes = Vec::new();
        rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        let back = decode_image(&bytes).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-6);
        let out = preprocess(&bytes, 6, &Normalization::identity()).unwrap();
        assert_eq!(out.shape(), &[3, 6, 6]);
    }

    #[test]
    fn corrupt_bytes_are_data_error() {
        assert!(matches!(decode_image(b"not an image"), Err(Error::Data(_))));
    }
}
