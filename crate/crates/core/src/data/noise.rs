use super::image::{quantize, RgbImage};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAX_SIGMA: f64 = 50.0;

/// Zero-mean Gaussian corruption in 8-bit intensity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const MEAN: f64 = 0.0;

    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(0.0..=MAX_SIGMA).contains(&sigma) {
            return Err(Error::invalid(format!("sigma {sigma} outside [0, {MAX_SIGMA}]")));
        }
        Ok(Self { sigma, seed })
    }
}

/// Adds `Normal(0, σ²)` noise to every channel value, then clamps to
/// `[0, 255]` and rounds half away from zero.
///
/// Samples come from a SplitMix64 stream seeded with `spec.seed` through the
/// Box-Muller transform, consumed in storage order (row-major, interleaved
/// RGB). With `σ = 0` the image is returned unchanged.
pub fn corrupt(clean: &RgbImage, spec: &NoiseSpec) -> RgbImage {
    if spec.sigma == 0.0 {
        return clean.clone();
    }
    let mut rng = SplitMix64::new(spec.seed);
    let pixels = clean
        .pixels()
        .iter()
        .map(|&p| quantize(f64::from(p) + NoiseSpec::MEAN + spec.sigma * rng.next_gaussian()))
        .collect();
    RgbImage::new(clean.width(), clean.height(), pixels).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let img = RgbImage::filled(8, 8, [10, 200, 255]);
        assert_eq!(corrupt(&img, &NoiseSpec::new(0.0, 5).unwrap()), img);
    }

    #[test]
    fn sigma_bounds_enforced() {
        assert!(NoiseSpec::new(-1.0, 0).is_err());
        assert!(NoiseSpec::new(50.5, 0).is_err());
        assert!(NoiseSpec::new(50.0, 0).is_ok());
    }

    #[test]
    fn requantizing_is_idempotent() {
        let img = RgbImage::filled(16, 16, [128, 30, 220]);
        let noisy = corrupt(&img, &NoiseSpec::new(20.0, 1).unwrap());
        let t = noisy.to_tensor::<f64>();
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), noisy);
    }

    #[test]
    fn white_image_clips_one_sided() {
        let img = RgbImage::filled(96, 96, [255, 255, 255]);
        let noisy = corrupt(&img, &NoiseSpec::new(50.0, 2).unwrap());
        let mean = noisy.pixels().iter().map(|&v| f64::from(v)).sum::<f64>()
            / noisy.pixels().len() as f64;
        assert!(mean < 255.0);
    }

    #[test]
    fn neighbouring_noise_uncorrelated() {
        let img = RgbImage::filled(128, 128, [128, 128, 128]);
        let noisy = corrupt(&img, &NoiseSpec::new(10.0, 3).unwrap());
        let d: Vec<f64> = noisy.pixels().iter().map(|&v| f64::from(v) - 128.0).collect();
        let pairs: Vec<(f64, f64)> = d.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        assert!(pairs.len() >= 10_000);
        let n = pairs.len() as f64;
        let (ma, mb) = (
            pairs.iter().map(|p| p.0).sum::<f64>() / n,
            pairs.iter().map(|p| p.1).sum::<f64>() / n,
        );
        let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
        let va = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
        let vb = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.02, "corr {corr}");
    }
}
