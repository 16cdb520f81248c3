use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_image, AugmentPolicy};
use super::dataset::{DatasetIndex, Entry};
use super::preprocess::{normalize, read_image, resize_bilinear, Normalization};
use crate::error::{config_err, Error, Result};
use crate::runtime::derive_seed;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

enum Source {
    Files(Vec<Entry>),
    Memory(Vec<Tensor<f32>>),
}

/// Augmentation for one epoch. Each sample's draw is seeded by
/// `(seed, epoch, sample index)` alone.
#[derive(Clone, Copy, Debug)]
pub struct AugmentDraw<'a> {
    pub policy: &'a AugmentPolicy,
    pub seed: u64,
    pub epoch: u64,
}

/// A stacked mini-batch of normalized model inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Produces model-ready batches. Images are decoded and resized once, then
/// kept in memory as `(3, size, size)` tensors in `[0, 1]`.
pub struct Loader {
    source: Source,
    labels: Vec<usize>,
    size: usize,
    norm: Normalization,
    cache: Vec<OnceLock<Tensor<f32>>>,
    cache_enabled: bool,
}

impl Loader {
    pub fn from_index(index: &DatasetIndex, size: usize, norm: Normalization, cache: bool) -> Result<Self> {
        norm.validate()?;
        if size == 0 {
            return Err(config_err!("input size must be positive"));
        }
        Ok(Self {
            labels: index.labels(),
            cache: (0..index.len()).map(|_| OnceLock::new()).collect(),
            source: Source::Files(index.entries.clone()),
            size,
            norm,
            cache_enabled: cache,
        })
    }

    /// In-memory images `(3, H, W)` in `[0, 1]`.
    pub fn from_memory(images: Vec<Tensor<f32>>, labels: Vec<usize>, size: usize, norm: Normalization) -> Result<Self> {
        norm.validate()?;
        if images.len() != labels.len() {
            return Err(config_err!("{} images but {} labels", images.len(), labels.len()));
        }
        Ok(Self {
            cache: (0..images.len()).map(|_| OnceLock::new()).collect(),
            source: Source::Memory(images),
            labels,
            size,
            norm,
            cache_enabled: true,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_size(&self) -> usize {
        self.size
    }

    fn decode(&self, i: usize) -> Result<Tensor<f32>> {
        let raw = match &self.source {
            Source::Files(entries) => read_image(&entries[i].path)?,
            Source::Memory(images) => images[i].clone(),
        };
        resize_bilinear(&raw, self.size, self.size)
    }

    /// Sample `i` resized, in `[0, 1]`, before augmentation and normalization.
    pub fn resized(&self, i: usize) -> Result<Tensor<f32>> {
        if i >= self.len() {
            return Err(Error::Data(format!("sample index {i} out of range ({} samples)", self.len())));
        }
        if !self.cache_enabled {
            return self.decode(i);
        }
        if let Some(t) = self.cache[i].get() {
            return Ok(t.clone());
        }
        let t = self.decode(i)?;
        Ok(self.cache[i].get_or_init(|| t).clone())
    }

    /// Normalized `(3, size, size)` input for sample `i`.
    pub fn input(&self, i: usize, augment: Option<AugmentDraw<'_>>) -> Result<Tensor<f32>> {
        let mut img = self.resized(i)?;
        if let Some(a) = augment.filter(|a| !a.policy.is_identity()) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, &[AUGMENT_STREAM, a.epoch, i as u64]));
            img = augment_image(&img, a.policy, &mut rng)?;
        }
        normalize(&img, &self.norm)
    }

    pub fn batch(&self, indices: &[usize], augment: Option<AugmentDraw<'_>>) -> Result<Batch> {
        if indices.is_empty() {
            return Err(config_err!("empty batch"));
        }
        let inputs = indices.iter().map(|&i| self.input(i, augment)).collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            images: Tensor::stack(&inputs)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }
}

/// Splits `indices` into batches of `batch_size`; the last batch may be
/// smaller. With `shuffle`, the order is a permutation seeded by `(seed, epoch)`.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_STREAM, epoch]));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_partial_batch_is_kept() {
        let idx: Vec<usize> = (0..7).collect();
        let b = epoch_batches(&idx, 3, 0, 0, false);
        assert_eq!(b, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
        let s = epoch_batches(&idx, 3, 5, 1, true);
        let mut flat: Vec<usize> = s.concat();
        assert_eq!(s, epoch_batches(&idx, 3, 5, 1, true));
        flat.sort();
        assert_eq!(flat, idx);
    }

    #[test]
    fn batches_stack_normalized_inputs() {
        let imgs = vec![Tensor::full([3, 4, 4], 0.5f32), Tensor::full([3, 6, 6], 1.0f32)];
        let loader = Loader::from_memory(imgs, vec![1, 0], 8, Normalization::identity()).unwrap();
        let b = loader.batch(&[1, 0], None).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 8, 8]);
        assert_eq!(b.labels, vec![0, 1]);
        assert!((b.images.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn augmentation_depends_only_on_seed_epoch_index() {
        let imgs: Vec<Tensor<f32>> = (0..3).map(|k| Tensor::from_fn([3, 8, 8], |i| ((i + k) % 9) as f32 / 9.0)).collect();
        let loader = Loader::from_memory(imgs, vec![0, 1, 2], 8, Normalization::default()).unwrap();
        let policy = AugmentPolicy::default();
        let draw = AugmentDraw { policy: &policy, seed: 4, epoch: 2 };
        let whole = loader.batch(&[0, 1, 2], Some(draw)).unwrap();
        let single = loader.input(2, Some(draw)).unwrap();
        assert_eq!(whole.images.slice_batch(2, 1).unwrap().data(), single.data());
    }
}
