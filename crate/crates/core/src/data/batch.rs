use std::path::PathBuf;

use super::image::{load_image, RgbImage};
use super::manifest::{DatasetManifest, Split};
use super::noise::{corrupt, NoiseSpec};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// A clean image with the corruption that applies to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clean: RgbImage,
    pub noise: NoiseSpec,
    pub source: Option<PathBuf>,
}

impl Sample {
    pub fn noisy(&self) -> RgbImage {
        corrupt(&self.clean, &self.noise)
    }
}

/// In-memory samples of one split.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub sigmas: Vec<f64>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Loads every clean image of `split`. Fails with the complete list of
    /// unreadable files.
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut samples = Vec::new();
        let mut failures = Vec::new();
        for row in manifest.split(split) {
            match load_image(&row.clean_path) {
                Ok(clean) => samples.push(Sample {
                    clean,
                    noise: NoiseSpec::new(f64::from(row.sigma), row.seed)?,
                    source: Some(row.clean_path.clone()),
                }),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if !failures.is_empty() {
            return Err(Error::invalid(format!(
                "{} unreadable file(s):\n  {}",
                failures.len(),
                failures.join("\n  ")
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Batches of one epoch in an order fixed by `epoch_seed`. The last
    /// batch may be short.
    pub fn batches<T: Scalar>(&self, batch_size: usize, epoch_seed: u64) -> Result<BatchIter<'_, T>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        SplitMix64::new(epoch_seed).shuffle(&mut order);
        Ok(BatchIter {
            dataset: self,
            order,
            batch_size,
            next: 0,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.samples.len().div_ceil(batch_size.max(1))
    }
}

/// Stacks equally sized images into `[N, 3, H, W]`.
pub fn stack<T: Scalar>(images: &[RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::Empty("stack"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::InvalidShape {
                op: "batch",
                msg: format!(
                    "mixed image sizes in one batch: {w}x{h} and {}x{}",
                    img.width(),
                    img.height()
                ),
            });
        }
        data.extend(img.to_tensor::<T>().into_data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

pub struct BatchIter<'a, T> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let picked: Vec<&Sample> = self.order[self.next..end]
            .iter()
            .map(|&i| &self.dataset.samples[i])
            .collect();
        self.next = end;
        let noisy: Vec<RgbImage> = picked.iter().map(|s| s.noisy()).collect();
        let clean: Vec<RgbImage> = picked.iter().map(|s| s.clean.clone()).collect();
        let sigmas = picked.iter().map(|s| s.noise.sigma).collect();
        Some((|| {
            Ok(Batch {
                noisy: stack(&noisy)?,
                clean: stack(&clean)?,
                sigmas,
            })
        })())
    }
}
