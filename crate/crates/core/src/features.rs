//! Fixed convolutional feature bank standing in for a learned first layer.
//!
//! 64 kernels of size 7x7 applied with stride 2 and reflection padding to the
//! channel-mean of the input. Kernels are drawn once from a fixed seed,
//! low-pass filtered, made zero-mean and scaled to unit L2 norm.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::ssim::reflect;

pub const FEATURE_CHANNELS: usize = 64;
pub const KERNEL_SIZE: usize = 7;
pub const STRIDE: usize = 2;
const PAD: isize = (KERNEL_SIZE / 2) as isize;
const BANK_SEED: u64 = 0x00c0_1de0_f1a7_0001;

pub type Kernel = [f64; KERNEL_SIZE * KERNEL_SIZE];

#[derive(Clone, Debug)]
pub struct FeatureBank {
    kernels: Vec<Kernel>,
}

impl FeatureBank {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = KERNEL_SIZE;
        let blur = [0.25, 0.5, 0.25];
        let kernels = (0..FEATURE_CHANNELS)
            .map(|_| {
                let raw: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut k = [0.0; KERNEL_SIZE * KERNEL_SIZE];
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for (di, bi) in blur.iter().enumerate() {
                            for (dj, bj) in blur.iter().enumerate() {
                                let r = reflect(i as isize + di as isize - 1, n);
                                let c = reflect(j as isize + dj as isize - 1, n);
                                acc += bi * bj * raw[r * n + c];
                            }
                        }
                        k[i * n + j] = acc;
                    }
                }
                let mean = k.iter().sum::<f64>() / k.len() as f64;
                k.iter_mut().for_each(|v| *v -= mean);
                let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                k.iter_mut().for_each(|v| *v /= norm);
                k
            })
            .collect();
        FeatureBank { kernels }
    }

    /// The frozen bank used by [`feature_extract`].
    pub fn standard() -> &'static FeatureBank {
        static BANK: OnceLock<FeatureBank> = OnceLock::new();
        BANK.get_or_init(|| FeatureBank::from_seed(BANK_SEED))
    }

    pub fn kernel(&self, c: usize) -> &Kernel {
        &self.kernels[c]
    }

    /// Raw strided correlation responses, before normalisation.
    pub fn response(&self, img: &Image) -> Result<Image> {
        if !matches!(img.channels, 1 | 3) {
            return Err(Error::InvalidInput(format!(
                "feature extraction takes 1 or 3 channels, got {}",
                img.channels
            )));
        }
        let (h, w) = (img.height, img.width);
        let lum = img.luminance();
        let (oh, ow) = output_shape(h, w);
        let rows: Vec<Vec<f64>> = (0..oh)
            .into_par_iter()
            .map(|oi| {
                let mut row = vec![0.0; ow * FEATURE_CHANNELS];
                let mut patch = [0.0; KERNEL_SIZE * KERNEL_SIZE];
                for oj in 0..ow {
                    for a in 0..KERNEL_SIZE {
                        let r = reflect((STRIDE * oi) as isize + a as isize - PAD, h);
                        for b in 0..KERNEL_SIZE {
                            let c = reflect((STRIDE * oj) as isize + b as isize - PAD, w);
                            patch[a * KERNEL_SIZE + b] = lum[r * w + c];
                        }
                    }
                    for (ch, k) in self.kernels.iter().enumerate() {
                        row[oj * FEATURE_CHANNELS + ch] =
                            k.iter().zip(&patch).map(|(x, y)| x * y).sum();
                    }
                }
                row
            })
            .collect();
        Ok(Image {
            height: oh,
            width: ow,
            channels: FEATURE_CHANNELS,
            data: rows.concat(),
        })
    }

    /// Responses min-max normalised to `[0, 1]` per channel; constant
    /// channels map to 0.
    pub fn extract(&self, img: &Image) -> Result<Image> {
        let mut out = self.response(img)?;
        for c in 0..FEATURE_CHANNELS {
            let (lo, hi) = out
                .data
                .iter()
                .skip(c)
                .step_by(FEATURE_CHANNELS)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let span = hi - lo;
            for v in out.data.iter_mut().skip(c).step_by(FEATURE_CHANNELS) {
                *v = if span > 1e-12 { (*v - lo) / span } else { 0.0 };
            }
        }
        Ok(out)
    }
}

pub fn output_shape(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(STRIDE), w.div_ceil(STRIDE))
}

pub fn feature_extract(img: &Image) -> Result<Image> {
    FeatureBank::standard().extract(img)
}

/// Ratio mapping full-resolution pixel coordinates onto a feature grid of
/// the given extent: 1 for an unstrided grid, `1/STRIDE` for a strided one.
pub fn coordinate_scale(full: usize, feature: usize) -> Result<f64> {
    if feature == full {
        Ok(1.0)
    } else if feature == full.div_ceil(STRIDE) {
        Ok(1.0 / STRIDE as f64)
    } else {
        Err(Error::ShapeMismatch(format!(
            "feature extent {feature} does not match image extent {full}"
        )))
    }
}
