//! Additive white Gaussian noise datasets: image I/O, corruption, the
//! manifest catalog and batch iteration.

mod batch;
mod image;
mod manifest;
mod noise;

pub use batch::{stack, Batch, BatchIter, Dataset, Sample};
pub use image::{load_image, save_image, ImageFormat, RgbImage};
pub use manifest::{build_manifest, list_images, row_seed, DatasetManifest, ManifestRow, Split};
pub use noise::{corrupt, NoiseSpec, MAX_SIGMA};
