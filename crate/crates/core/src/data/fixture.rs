use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::runtime::derive_seed;

const EMOTIONS: [&str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];

/// Synthetic face-like dataset: a shared skin-toned oval on a noisy
/// background, plus one class-specific colored mark whose position and shape
/// identify the class. Each image gets a random offset, brightness and pixel
/// noise, so samples differ while classes stay linearly separable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub size: u32,
    /// Distinct subject ids cycled through inside each class.
    pub subjects: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            per_class: 10,
            seed: 0,
            size: 224,
            subjects: 5,
        }
    }
}

/// Directory name of class `c`. The numeric prefix keeps the sorted order
/// equal to the generation order.
pub fn fixture_class_name(c: usize) -> String {
    match EMOTIONS.get(c) {
        Some(e) => format!("{c:02}_{e}"),
        None => format!("{c:02}_class"),
    }
}

fn class_color(c: usize, k: usize) -> [f32; 3] {
    // evenly spaced hues at full saturation
    let h = c as f32 / k as f32 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn render(c: usize, k: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let (dx, dy) = (rng.gen_range(-0.03..0.03) * s, rng.gen_range(-0.03..0.03) * s);
    let brightness: f32 = rng.gen_range(0.9..1.1);
    let (cx, cy) = (s / 2.0 + dx, s / 2.0 + dy);
    let angle = std::f32::consts::TAU * c as f32 / k as f32;
    let (mx, my) = (cx + 0.28 * s * angle.cos(), cy + 0.28 * s * angle.sin());
    let radius = 0.11 * s;
    let color = class_color(c, k);
    let shape = c % 3;
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let mut v = [0.15f32, 0.15, 0.2];
        let (ox, oy) = ((fx - cx) / (0.33 * s), (fy - cy) / (0.42 * s));
        if ox * ox + oy * oy <= 1.0 {
            v = [0.85, 0.68, 0.55];
        }
        let (ux, uy) = (fx - mx, fy - my);
        let inside = match shape {
            0 => ux * ux + uy * uy <= radius * radius,
            1 => ux.abs() <= radius * 0.85 && uy.abs() <= radius * 0.85,
            _ => ux.abs() <= radius * 1.2 && uy.abs() <= radius * 0.45,
        };
        if inside {
            v = color;
        }
        let noise: f32 = rng.gen_range(-0.04..0.04);
        *px = Rgb(v.map(|ch| ((ch * brightness + noise).clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

/// Writes `spec.classes × spec.per_class` PNG files to
/// `dir/<class>/s<subject>_<index>.png` and returns their paths in the order
/// `load_dataset` will list them. The same spec always produces the same bytes.
pub fn generate_fixture(dir: impl AsRef<Path>, spec: &FixtureSpec) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if spec.classes < 2 {
        return Err(config_err!("a fixture needs at least 2 classes, got {}", spec.classes));
    }
    if spec.per_class == 0 || spec.subjects == 0 {
        return Err(config_err!("per_class and subjects must be positive"));
    }
    if spec.size < 8 {
        return Err(config_err!("fixture images must be at least 8 pixels wide"));
    }
    let mut paths = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let class_dir = dir.join(fixture_class_name(c));
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[c as u64, i as u64]));
            let img = render(c, spec.classes, spec.size, &mut rng);
            let path = class_dir.join(format!("s{:02}_{:03}.png", i % spec.subjects, i));
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_sort_in_generation_order() {
        let names: Vec<String> = (0..12).map(fixture_class_name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = FixtureSpec {
            classes: 2,
            per_class: 2,
            size: 32,
            ..FixtureSpec::default()
        };
        let pa = generate_fixture(a.path(), &spec).unwrap();
        let pb = generate_fixture(b.path(), &spec).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    #[test]
    fn one_class_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            classes: 1,
            ..FixtureSpec::default()
        };
        assert!(matches!(generate_fixture(d.path(), &spec), Err(Error::Config(_))));
    }
}
