//! Training loss and image quality metrics.
//!
//! PSNR and SSIM are scored in the quantized 8-bit domain with a peak of
//! 255 unless [`MetricDomain::Unit`] is requested. PSNR pools the squared
//! error of all channels into one MSE. SSIM uses an 11×11 Gaussian window
//! (σ = 1.5), K1 = 0.01, K2 = 0.03, evaluated at every position where the
//! window fits, averaged per channel and then over channels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, RgbImage};
use crate::error::{Error, Result};
use crate::model::Irunet;
use crate::parallel;
use crate::tensor::{pairwise_sum, Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute error between reconstruction `z` and target `x`.
pub fn mae_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, x: Var) -> Result<Var> {
    let (sz, sx) = (tape.value(z).shape(), tape.value(x).shape());
    if sz != sx {
        return Err(Error::ShapeMismatch {
            op: "mae_loss",
            left: sz.to_vec(),
            right: sx.to_vec(),
        });
    }
    let diff = tape.sub(z, x)?;
    tape.abs_mean(diff)
}

/// Non-differentiable MAE.
pub fn mae<T: Scalar>(z: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    let d = z.zip_with(x, "mae", |a, b| (a - b).abs())?;
    Ok(pairwise_sum(&d.cast::<f64>().into_data()) / d.len() as f64)
}

fn check_same_dims(a: &RgbImage, b: &RgbImage, op: &'static str) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.height(), a.width(), 3],
            right: vec![b.height(), b.width(), 3],
        });
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; `+∞` when the inputs are equal.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR in dB of two 8-bit images, peak 255.
pub fn psnr(z: &RgbImage, x: &RgbImage) -> Result<f64> {
    check_same_dims(z, x, "psnr")?;
    let sq: Vec<f64> = z
        .pixels()
        .iter()
        .zip(x.pixels())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .collect();
    Ok(psnr_from_mse(pairwise_sum(&sq) / sq.len() as f64, 255.0))
}

/// PSNR of `[0, 1]` tensors with peak 1.
pub fn psnr_unit<T: Scalar>(z: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    let sq = z.zip_with(x, "psnr", |a, b| (a - b) * (a - b))?;
    let mse = pairwise_sum(&sq.cast::<f64>().into_data()) / sq.len() as f64;
    Ok(psnr_from_mse(mse, 1.0))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Mean SSIM of two planes of size `h × w` with dynamic range `range`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            msg: format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let rows: Vec<f64> = parallel::map_indices(oh, |r| {
        let mut row = Vec::with_capacity(ow);
        for s in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, ti) in taps.iter().enumerate() {
                for (j, tj) in taps.iter().enumerate() {
                    let k = ti * tj;
                    let idx = (r + i) * w + s + j;
                    let (x, y) = (a[idx], b[idx]);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            row.push(num / den);
        }
        pairwise_sum(&row)
    });
    Ok(pairwise_sum(&rows) / (oh * ow) as f64)
}

fn planes(img: &RgbImage) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, plane) in out.iter_mut().enumerate() {
        *plane = img
            .pixels()
            .iter()
            .skip(c)
            .step_by(3)
            .map(|&v| f64::from(v))
            .collect();
    }
    out
}

/// SSIM of two 8-bit RGB images on the 0–255 scale.
pub fn ssim(z: &RgbImage, x: &RgbImage) -> Result<f64> {
    check_same_dims(z, x, "ssim")?;
    let (pz, px) = (planes(z), planes(x));
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_plane(&pz[c], &px[c], z.height(), z.width(), 255.0)?;
    }
    Ok(total / 3.0)
}

/// SSIM of `[3, H, W]` (or `[1, 3, H, W]`) tensors on the `[0, 1]` scale.
pub fn ssim_unit<T: Scalar>(z: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    if z.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: z.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let (h, w) = match z.shape() {
        &[3, h, w] | &[1, 3, h, w] => (h, w),
        s => {
            return Err(Error::InvalidShape {
                op: "ssim",
                msg: format!("expected a single RGB image, got {s:?}"),
            })
        }
    };
    let (zd, xd) = (z.cast::<f64>().into_data(), x.cast::<f64>().into_data());
    let mut total = 0.0;
    for c in 0..3 {
        let r = c * h * w..(c + 1) * h * w;
        total += ssim_plane(&zd[r.clone()], &xd[r], h, w, 1.0)?;
    }
    Ok(total / 3.0)
}

/// Scale on which denoised outputs are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricDomain {
    /// Quantize to 8 bits and score with peak 255.
    #[default]
    Byte,
    /// Score the raw `[0, 1]` outputs with peak 1.
    Unit,
}

/// Anything that maps a noisy `[1, 3, H, W]` batch to a denoised one.
pub trait Denoiser {
    fn denoise(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Denoiser for Irunet<f32> {
    fn denoise(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(noisy)
    }
}

/// Returns its input; scores the noisy images themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(noisy.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    pub sigma: f64,
    pub n: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub mae_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub groups: Vec<GroupScore>,
    pub overall: GroupScore,
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

fn summarize(sigma: f64, scores: &[&ImageScore]) -> GroupScore {
    let col = |f: fn(&ImageScore) -> f64| scores.iter().map(|s| f(s)).collect::<Vec<_>>();
    GroupScore {
        sigma,
        n: scores.len(),
        psnr_mean: mean(&col(|s| s.psnr_db)),
        ssim_mean: mean(&col(|s| s.ssim)),
        mae_mean: mean(&col(|s| s.mae)),
    }
}

impl MetricReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("metric report"));
        }
        let mut by_sigma: BTreeMap<u64, Vec<&ImageScore>> = BTreeMap::new();
        for s in &images {
            by_sigma.entry(s.sigma.to_bits()).or_default().push(s);
        }
        let mut groups: Vec<GroupScore> = by_sigma
            .values()
            .map(|v| summarize(v[0].sigma, v))
            .collect();
        groups.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        let all: Vec<&ImageScore> = images.iter().collect();
        let overall = summarize(f64::NAN, &all);
        Ok(Self {
            images,
            groups,
            overall,
        })
    }

    /// Tab-separated table: one row per σ and a trailing `ALL` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sigma\tn\tpsnr_mean\tssim_mean\tmae_mean\n");
        let row = |out: &mut String, label: String, g: &GroupScore| {
            let _ = writeln!(
                out,
                "{label}\t{}\t{}\t{:.6}\t{:.6}",
                g.n,
                format_db(g.psnr_mean),
                g.ssim_mean,
                g.mae_mean
            );
        };
        for g in &self.groups {
            row(&mut out, format_sigma(g.sigma), g);
        }
        row(&mut out, "ALL".into(), &self.overall);
        out
    }
}

pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn format_sigma(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}

/// Denoises every sample of `dataset` one image at a time and scores the
/// result against its clean image.
pub fn evaluate(denoiser: &impl Denoiser, dataset: &Dataset, domain: MetricDomain) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for sample in dataset.samples() {
        let noisy = sample.noisy();
        let (w, h) = (noisy.width(), noisy.height());
        let input = noisy.to_tensor::<f32>().reshape(vec![1, 3, h, w])?;
        let out = denoiser.denoise(&input)?;
        let clean_t = sample.clean.to_tensor::<f32>().reshape(vec![1, 3, h, w])?;
        let score = match domain {
            MetricDomain::Byte => {
                let z = RgbImage::from_tensor(&out)?;
                ImageScore {
                    sigma: sample.noise.sigma,
                    psnr_db: psnr(&z, &sample.clean)?,
                    ssim: ssim(&z, &sample.clean)?,
                    mae: mae(&z.to_tensor::<f64>(), &sample.clean.to_tensor::<f64>())?,
                }
            }
            MetricDomain::Unit => ImageScore {
                sigma: sample.noise.sigma,
                psnr_db: psnr_unit(&out, &clean_t)?,
                ssim: ssim_unit(&out, &clean_t)?,
                mae: mae(&out, &clean_t)?,
            },
        };
        scores.push(score);
    }
    MetricReport::from_scores(scores)
}
