//! World-frame point clouds from per-frame depth, and windowed depth
//! averaging across neighbouring frames.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{check_shape, BilinearTap, DepthField, Image, Intrinsics, Mask, PoseSE3};
use crate::synth::relative_pose;

pub const DEFAULT_VOXEL: f64 = 0.02;
pub const DEFAULT_WINDOW: usize = 7;
/// Neighbour depths further than this relative gap from the centre are dropped.
pub const DEFAULT_OUTLIER_GATE: f64 = 0.2;
/// Lookups whose four neighbour taps spread wider than this (relative)
/// straddle a depth discontinuity and are skipped.
const TAP_SPREAD: f64 = 0.05;

/// One frame to fuse. `pose_world` maps camera coordinates to world.
#[derive(Clone, Copy, Debug)]
pub struct FusionView<'a> {
    pub depth: &'a DepthField,
    pub image: &'a Image,
    pub valid: Option<&'a Mask>,
    pub pose_world: PoseSE3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Binary little-endian PLY with float xyz and uchar rgb.
    pub fn write_ply<W: Write>(&self, mut out: W) -> Result<()> {
        write!(
            out,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            self.len()
        )?;
        let mut buf = Vec::with_capacity(self.len() * 15);
        for (p, c) in self.positions.iter().zip(&self.colors) {
            for v in p.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            buf.extend_from_slice(c);
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Replaces the points in each occupied voxel by their centroid and mean
    /// colour. Voxels keep the order of their first point.
    pub fn voxel_downsample(&self, voxel: f64) -> Result<PointCloud> {
        if !(voxel > 0.0 && voxel.is_finite()) {
            return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel}")));
        }
        let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
        let mut sums: Vec<(Vector3<f64>, [f64; 3], usize)> = Vec::new();
        for (p, c) in self.positions.iter().zip(&self.colors) {
            let key = [0, 1, 2].map(|a| (p[a] / voxel).floor() as i64);
            let slot = *slots.entry(key).or_insert_with(|| {
                sums.push((Vector3::zeros(), [0.0; 3], 0));
                sums.len() - 1
            });
            let entry = &mut sums[slot];
            entry.0 += p;
            for a in 0..3 {
                entry.1[a] += c[a] as f64;
            }
            entry.2 += 1;
        }
        let mut out = PointCloud::default();
        for (p, c, n) in sums {
            let n = n as f64;
            out.positions.push(p / n);
            out.colors.push(c.map(|v| (v / n).round() as u8));
        }
        Ok(out)
    }
}

fn color_of(img: &Image, i: usize, j: usize) -> [u8; 3] {
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels {
        3 => [0, 1, 2].map(|c| to_byte(img.at(i, j, c))),
        _ => [to_byte(img.at(i, j, 0)); 3],
    }
}

/// Backprojects every valid pixel into world coordinates, frame by frame in
/// row-major order, then optionally downsamples on a voxel grid.
pub fn fuse_pointcloud(views: &[FusionView], k: &Intrinsics, voxel: Option<f64>) -> Result<PointCloud> {
    k.validate()?;
    for v in views {
        check_shape("depth", v.depth.shape(), k)?;
        check_shape("image", v.image.shape(), k)?;
        if let Some(m) = v.valid {
            check_shape("valid mask", (m.height, m.width), k)?;
        }
    }
    let parts: Vec<PointCloud> = views
        .par_iter()
        .map(|v| {
            let mut part = PointCloud::default();
            for i in 0..k.height {
                for j in 0..k.width {
                    if v.valid.is_some_and(|m| !m.at(i, j)) {
                        continue;
                    }
                    let x = k.ray(Vector2::new(j as f64, i as f64)) * v.depth.at(i, j);
                    part.positions.push(v.pose_world.transform_point(&x));
                    part.colors.push(color_of(v.image, i, j));
                }
            }
            part
        })
        .collect();
    let mut cloud = PointCloud::default();
    for p in parts {
        cloud.positions.extend(p.positions);
        cloud.colors.extend(p.colors);
    }
    match voxel {
        Some(v) => cloud.voxel_downsample(v),
        None => Ok(cloud),
    }
}

/// Depth of neighbour `n` seen from the centre camera at centre pixel
/// `(i, j)`, or `None` when the transfer leaves either image or lands on a
/// depth discontinuity.
fn transferred_depth(
    center_depth: f64,
    i: usize,
    j: usize,
    neighbour: &DepthField,
    c_to_n: &PoseSE3,
    n_to_c: &PoseSE3,
    k: &Intrinsics,
) -> Option<f64> {
    let x_n = c_to_n.transform_point(&(k.ray(Vector2::new(j as f64, i as f64)) * center_depth));
    if x_n.z <= crate::geometry::DEPTH_EPSILON {
        return None;
    }
    let q = k.project(&x_n);
    let tap = BilinearTap::new(q, k.width, k.height)?;
    let taps = tap.indices(k.width).map(|idx| neighbour.data[idx]);
    let (lo, hi) = taps.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo > TAP_SPREAD * lo {
        return None;
    }
    let d = tap.interpolate(taps);
    let back = n_to_c.transform_point(&(k.ray(q) * d));
    (back.z > crate::geometry::DEPTH_EPSILON).then_some(back.z)
}

pub fn windowed_depth_average(
    depths: &[DepthField],
    poses_world: &[PoseSE3],
    k: &Intrinsics,
    window: usize,
) -> Result<Vec<DepthField>> {
    windowed_depth_average_with(depths, poses_world, k, window, DEFAULT_OUTLIER_GATE)
}

/// For each centre frame, averages its own depth with the depths of the
/// frames within `window / 2` of it, transferred into the centre view.
/// Transfers that leave the image or differ from the centre depth by more
/// than `gate` (relative) are skipped.
pub fn windowed_depth_average_with(
    depths: &[DepthField],
    poses_world: &[PoseSE3],
    k: &Intrinsics,
    window: usize,
    gate: f64,
) -> Result<Vec<DepthField>> {
    k.validate()?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("window must be a positive odd count, got {window}")));
    }
    if window > depths.len() {
        return Err(Error::InvalidInput(format!(
            "window {window} exceeds sequence length {}",
            depths.len()
        )));
    }
    if poses_world.len() != depths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} poses for {} depth maps",
            poses_world.len(),
            depths.len()
        )));
    }
    if !(gate > 0.0) {
        return Err(Error::InvalidInput(format!("outlier gate must be positive, got {gate}")));
    }
    for d in depths {
        check_shape("depth", d.shape(), k)?;
    }
    let half = window / 2;
    let n = depths.len();
    let out = (0..n)
        .into_par_iter()
        .map(|c| {
            let center = &depths[c];
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(n - 1);
            let links: Vec<(usize, PoseSE3, PoseSE3)> = (lo..=hi)
                .filter(|&m| m != c)
                .map(|m| {
                    (
                        m,
                        relative_pose(&poses_world[c], &poses_world[m]),
                        relative_pose(&poses_world[m], &poses_world[c]),
                    )
                })
                .collect();
            let mut data = center.data.clone();
            for i in 0..k.height {
                for j in 0..k.width {
                    let d0 = center.at(i, j);
                    let mut sum = d0;
                    let mut count = 1.0;
                    for (m, c_to_n, n_to_c) in &links {
                        if let Some(z) = transferred_depth(d0, i, j, &depths[*m], c_to_n, n_to_c, k) {
                            if ((z - d0) / d0).abs() <= gate {
                                sum += z;
                                count += 1.0;
                            }
                        }
                    }
                    data[i * k.width + j] = sum / count;
                }
            }
            DepthField::new(k.height, k.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out)
}
