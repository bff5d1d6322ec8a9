//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod fd;

use colde::objectives::{Frame, FramePair};
use colde::synth::{render_sequence, RenderedSequence, SceneConfig};
use colde::{DepthField, Image, Intrinsics, NormalField, PoseSE3};
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth random texture plus a little per-pixel noise, kept below the
/// specular threshold.
pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, channels: usize) -> Image {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.0..6.3),
                rng.random_range(0.05..0.12),
            )
        })
        .collect();
    let mut img = Image::filled(h, w, channels, 0.0);
    for i in 0..h {
        for j in 0..w {
            let base: f64 = waves
                .iter()
                .map(|(a, b, ph, amp)| amp * (a * i as f64 + b * j as f64 + ph).sin())
                .sum();
            for c in 0..channels {
                *img.at_mut(i, j, c) = (0.5 + base + rng.random_range(-0.05..0.05) + 0.03 * c as f64).clamp(0.05, 0.9);
            }
        }
    }
    img
}

pub fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthField {
    let tilt = rng.random_range(-0.02..0.02);
    DepthField::from_fn(h, w, |i, _| 1.5 + tilt * i as f64).map(|mut d| {
        d.data.iter_mut().for_each(|v| *v *= rng.random_range(0.9..1.1));
        d
    })
    .unwrap()
}

/// Unit normals scattered around the optical axis, facing the camera.
pub fn random_normals(rng: &mut ChaCha8Rng, h: usize, w: usize) -> NormalField {
    let data = (0..h * w)
        .map(|_| {
            Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), -1.0).normalize()
        })
        .collect();
    NormalField::new(h, w, data).unwrap()
}

pub fn small_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
    let mut xi = Vector6::zeros();
    for c in 0..3 {
        xi[c] = rng.random_range(-0.02..0.02);
    }
    for c in 3..6 {
        xi[c] = rng.random_range(-0.04..0.04);
    }
    PoseSE3::exp(&xi)
}

/// A random two-frame problem of size `h x w`.
pub struct Instance {
    pub target: Frame,
    pub source: Frame,
    pub pose: PoseSE3,
    pub k: Intrinsics,
}

impl Instance {
    pub fn random(seed: u64, h: usize, w: usize) -> Self {
        let mut r = rng(seed);
        let k = Intrinsics::from_fov(w, h, 60.0).unwrap();
        let frame = |r: &mut ChaCha8Rng| {
            Frame::new(random_image(r, h, w, 3), random_depth(r, h, w), random_normals(r, h, w)).unwrap()
        };
        let target = frame(&mut r);
        let source = frame(&mut r);
        Instance {
            target,
            source,
            pose: small_pose(&mut r),
            k,
        }
    }

    pub fn pair(&self, channel: usize) -> FramePair<'_> {
        FramePair {
            target: &self.target,
            source: &self.source,
            pose_t_to_s: self.pose,
            intrinsics: self.k,
            feature_channel: channel,
        }
    }
}

pub fn default_sequence(frames: usize) -> RenderedSequence {
    let mut cfg = SceneConfig::default();
    cfg.camera_path.truncate(frames);
    render_sequence(&cfg).unwrap()
}

pub fn gt_frames(seq: &RenderedSequence) -> Vec<Frame> {
    seq.frames
        .iter()
        .map(|f| Frame::new(f.image.clone(), f.gt_depth.clone(), f.gt_normals.clone()).unwrap())
        .collect()
}

/// `D · exp(σ ε)` per pixel with `ε ~ N(0, 1)`.
pub fn log_normal_noise(depth: &DepthField, sigma: f64, scale: f64, rng: &mut ChaCha8Rng) -> DepthField {
    let normal = Normal::new(0.0, sigma).unwrap();
    DepthField::new(
        depth.height,
        depth.width,
        depth.data.iter().map(|d| d * scale * f64::exp(normal.sample(rng))).collect(),
    )
    .unwrap()
}

/// Smallest distance of a coordinate to an integer grid line.
pub fn grid_margin(x: f64) -> f64 {
    let f = x - x.floor();
    f.min(1.0 - f)
}
