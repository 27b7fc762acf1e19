//! Images, masks, datasets and deterministic batching.

pub mod fixtures;
pub mod image;
pub mod manifest;
pub mod mask;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use fixtures::{fixture_image, FIXTURE_COUNT, FIXTURE_SIZE};
pub use image::{load_image, load_mask, save_image};
pub use manifest::{Manifest, Split};
pub use mask::{generate_mask, hole_ratio, Bucket, MaskSpec};

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

/// Value written into hole pixels.
pub const HOLE_VALUE: f64 = 1.0;

/// `(1 - mask) * clean + mask * HOLE_VALUE`; known pixels are copied bitwise.
pub fn corrupt<T: Scalar>(clean: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, _, h, w] = clean.shape();
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::shape(
            "corrupt",
            shape_str([b, 1, h, w]),
            shape_str(mask.shape()),
        ));
    }
    let hole = T::from_f64(HOLE_VALUE);
    Ok(Tensor::from_fn(clean.shape(), |[bi, c, y, x]| {
        if mask.at(bi, 0, y, x) > T::zero() {
            hole
        } else {
            clean.at(bi, c, y, x)
        }
    }))
}

/// One clean image with its hole mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    /// `[1, 3, H, W]`
    pub clean: Tensor<T>,
    /// `[1, 1, H, W]`, 1 marks a hole.
    pub mask: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn bucket(&self) -> Bucket {
        Bucket::classify(hole_ratio(&self.mask))
    }
}

/// Seed of the mask for sample `index` of a dataset seeded with `seed`.
pub fn mask_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(index as u64 + 1)
}

#[derive(Debug, Clone, Default)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Fixture images `indices` with masks of `bucket`.
    pub fn fixtures(indices: impl IntoIterator<Item = usize>, size: usize, bucket: Bucket, seed: u64) -> Result<Self> {
        let samples = indices
            .into_iter()
            .map(|i| {
                Ok(Sample {
                    id: format!("fixture{i:03}"),
                    clean: fixture_image(i, size, seed),
                    mask: generate_mask(&MaskSpec::new(bucket, mask_seed(seed, i)), size, size)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    /// Load one split. Masks come from the manifest's mask directory when
    /// set, otherwise they are generated per sample.
    pub fn from_manifest(m: &Manifest, split: Split) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, rel) in m.files(split).iter().enumerate() {
            let path = m.root.join(rel);
            let clean = load_image::<T>(&path)?;
            let [_, _, h, w] = clean.shape();
            if h != m.resolution || w != m.resolution {
                return Err(Error::format(
                    &path,
                    format!("image is {w}x{h}, manifest resolution is {}", m.resolution),
                ));
            }
            let stem = rel
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mask = match &m.masks {
                Some(dir) => {
                    let mp = dir.join(format!("{stem}.png"));
                    let mask = load_mask::<T>(&mp)?;
                    if mask.shape() != [1, 1, h, w] {
                        return Err(Error::format(&mp, "mask size differs from image"));
                    }
                    mask
                }
                None => generate_mask(&MaskSpec::new(m.bucket, mask_seed(m.seed, i)), h, w)?,
            };
            samples.push(Sample { id: stem, clean, mask });
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack samples, mirroring those with `flip` set.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<Batch<T>> {
        let pick = |f: &dyn Fn(&Sample<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let items: Vec<_> = indices
                .iter()
                .zip(flips.iter().chain(std::iter::repeat(&false)))
                .map(|(&i, &fl)| {
                    let t = f(&self.samples[i]);
                    if fl {
                        flip_horizontal(t)
                    } else {
                        t.clone()
                    }
                })
                .collect();
            Tensor::stack(&items)
        };
        let clean = pick(&|s| &s.clean)?;
        let mask = pick(&|s| &s.mask)?;
        let corrupted = corrupt(&clean, &mask)?;
        Ok(Batch {
            ids: indices.iter().map(|&i| self.samples[i].id.clone()).collect(),
            corrupted,
            mask,
            clean,
        })
    }
}

pub fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let w = t.width();
    Tensor::from_fn(t.shape(), |[b, c, y, x]| t.at(b, c, y, w - 1 - x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `[B, 3, H, W]` network input.
    pub corrupted: Tensor<T>,
    /// `[B, 1, H, W]`
    pub mask: Tensor<T>,
    /// `[B, 3, H, W]` ground truth.
    pub clean: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Shuffled per epoch, partial final batch dropped.
    Train,
    /// Dataset order, partial final batch kept.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Random horizontal flips (training only).
    pub flip: bool,
}

impl BatchPlan {
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        match self.mode {
            Mode::Train => n / self.batch_size,
            Mode::Eval => n.div_ceil(self.batch_size),
        }
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
    }

    /// Sample order and flip flags for one epoch; a pure function of
    /// `(n, seed, epoch)`.
    pub fn epoch(&self, n: usize, epoch: usize) -> Result<Vec<(Vec<usize>, Vec<bool>)>> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if n == 0 {
            return Err(Error::Config("dataset split is empty".into()));
        }
        if self.batches_per_epoch(n) == 0 {
            return Err(Error::Config(format!(
                "split has {n} samples, fewer than one training batch of {}",
                self.batch_size
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = self.epoch_rng(epoch);
        let train = self.mode == Mode::Train;
        if train {
            order.shuffle(&mut rng);
        }
        let flips: Vec<bool> = (0..n).map(|_| train && self.flip && rng.gen_bool(0.5)).collect();
        Ok(order
            .chunks(self.batch_size)
            .take(self.batches_per_epoch(n))
            .map(|c| (c.to_vec(), c.iter().map(|&i| flips[i]).collect()))
            .collect())
    }
}

/// All batches of one epoch.
pub fn batch_iter<'a, T: Scalar>(
    data: &'a Dataset<T>,
    plan: BatchPlan,
    epoch: usize,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
    let groups = plan.epoch(data.len(), epoch)?;
    Ok(groups.into_iter().map(move |(idx, fl)| data.batch(&idx, &fl)))
}
