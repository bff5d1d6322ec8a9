//! Loss terms over a target/source frame pair and their masked combination.
//!
//! Every per-pixel term lives on the target pixel grid. The photometric,
//! feature, depth and normal terms are averaged over the combined mask
//! `M = M_auto ∧ M_spec ∧ M_valid`; orthogonality and smoothness are dense
//! priors averaged over both views.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{coordinate_scale, feature_extract, FEATURE_CHANNELS};
use crate::geometry::{
    check_shape, project_point, BilinearTap, DepthField, Image, Intrinsics, Mask, NormalField,
    PoseSE3, Projection, ScalarField,
};
use crate::ssim::{self, ssim_plane};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub spec_threshold: f64,
    pub spec_dilate: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.85,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.005,
            lambda4: 0.001,
            lambda5: 0.01,
            ssim_c1: ssim::DEFAULT_C1,
            ssim_c2: ssim::DEFAULT_C2,
            spec_threshold: 0.95,
            spec_dilate: 2,
        }
    }
}

impl LossWeights {
    /// Every weight zeroed; only the photometric group remains.
    pub fn photometric_only() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("alpha", self.alpha),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("ssim_c1", self.ssim_c1),
            ("ssim_c2", self.ssim_c2),
            ("spec_threshold", self.spec_threshold),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::InvalidInput(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One view: image, depth and normal estimates, and the image's feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub depth: DepthField,
    pub normals: NormalField,
    pub features: Image,
}

impl Frame {
    /// Builds a frame and extracts its feature maps.
    pub fn new(image: Image, depth: DepthField, normals: NormalField) -> Result<Self> {
        let features = feature_extract(&image)?;
        Self::with_features(image, depth, normals, features)
    }

    pub fn with_features(
        image: Image,
        depth: DepthField,
        normals: NormalField,
        features: Image,
    ) -> Result<Self> {
        let shape = image.shape();
        if depth.shape() != shape || normals.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "frame image {:?}, depth {:?}, normals {:?}",
                shape,
                depth.shape(),
                normals.shape()
            )));
        }
        coordinate_scale(image.height, features.height)?;
        coordinate_scale(image.width, features.width)?;
        Ok(Frame {
            image,
            depth,
            normals,
            features,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FramePair<'a> {
    pub target: &'a Frame,
    pub source: &'a Frame,
    pub pose_t_to_s: PoseSE3,
    pub intrinsics: Intrinsics,
    pub feature_channel: usize,
}

impl<'a> FramePair<'a> {
    pub fn new(
        target: &'a Frame,
        source: &'a Frame,
        pose_t_to_s: PoseSE3,
        intrinsics: Intrinsics,
        feature_channel: usize,
    ) -> Result<Self> {
        let pair = FramePair {
            target,
            source,
            pose_t_to_s,
            intrinsics,
            feature_channel,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        check_shape("target frame", self.target.shape(), &self.intrinsics)?;
        check_shape("source frame", self.source.shape(), &self.intrinsics)?;
        if self.target.image.channels != self.source.image.channels {
            return Err(Error::ShapeMismatch(format!(
                "target has {} channels, source {}",
                self.target.image.channels, self.source.image.channels
            )));
        }
        let feats = [&self.target.features, &self.source.features];
        if feats.iter().any(|f| f.channels != FEATURE_CHANNELS) {
            return Err(Error::ShapeMismatch("feature maps must have 64 channels".into()));
        }
        if self.target.features.shape() != self.source.features.shape() {
            return Err(Error::ShapeMismatch("target and source feature maps differ in shape".into()));
        }
        if self.feature_channel >= FEATURE_CHANNELS {
            return Err(Error::InvalidInput(format!(
                "feature channel {} outside [0, {FEATURE_CHANNELS})",
                self.feature_channel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo: f64,
    pub feat: f64,
    pub depth: f64,
    pub norm: f64,
    pub orth: f64,
    pub smooth: f64,
    pub total: f64,
    pub masked_pixel_count: usize,
    /// Set when the combined mask kept no pixel; the masked group is then 0.
    pub empty_mask: bool,
}

impl LossBreakdown {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.photo
            + w.lambda1 * self.feat
            + w.lambda2 * self.depth
            + w.lambda3 * self.norm
            + w.lambda4 * self.orth
            + w.lambda5 * self.smooth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMasks {
    pub valid: Mask,
    pub auto: Mask,
    pub specular: Mask,
    pub combined: Mask,
}

/// Bilinear lookup into a feature plane with coordinates clamped to the grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FeatureLookup {
    pub tap: BilinearTap,
    /// `∂q_feature / ∂q_image` per axis; zero where the coordinate was clamped.
    pub jacobian: Vector2<f64>,
}

impl FeatureLookup {
    fn new(q: Vector2<f64>, scale: Vector2<f64>, width: usize, height: usize) -> Self {
        let clamp = |v: f64, s: f64, n: usize| {
            let x = v * s;
            let hi = (n - 1) as f64;
            if x < 0.0 {
                (0.0, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, s)
            }
        };
        let (x, jx) = clamp(q.x, scale.x, width);
        let (y, jy) = clamp(q.y, scale.y, height);
        FeatureLookup {
            tap: BilinearTap::new(Vector2::new(x, y), width, height)
                .expect("clamped coordinate lies on the grid"),
            jacobian: Vector2::new(jx, jy),
        }
    }
}

/// Everything computed while evaluating a pair, kept for the adjoint pass.
#[derive(Clone, Debug)]
pub struct PairEvaluation {
    pub height: usize,
    pub width: usize,
    pub projections: Vec<Projection>,
    pub(crate) taps: Vec<Option<BilinearTap>>,
    pub(crate) feature_lookups: Vec<Option<FeatureLookup>>,
    pub warped: Image,
    pub warped_feature: Vec<f64>,
    pub target_feature: Vec<f64>,
    pub sampled_depth: Vec<f64>,
    pub sampled_normals: Vec<Vector3<f64>>,
    pub rotated_normals: Vec<Vector3<f64>>,
    pub photo_map: ScalarField,
    pub feat_map: ScalarField,
    pub depth_map: ScalarField,
    pub norm_map: ScalarField,
    pub masks: PairMasks,
    pub orth_target: f64,
    pub orth_source: f64,
    pub smooth_target: f64,
    pub smooth_source: f64,
    pub breakdown: LossBreakdown,
}

/// `(1-α)·mean_c|a - b| + (α/2)·(1 - SSIM(a, b))` at every pixel.
pub fn photometric_map(a: &Image, b: &Image, w: &LossWeights) -> Result<ScalarField> {
    let s = ssim::ssim(a, b, w.ssim_c1, w.ssim_c2)?;
    let ch = a.channels as f64;
    let data = a
        .data
        .chunks_exact(a.channels)
        .zip(b.data.chunks_exact(b.channels))
        .zip(&s.data)
        .map(|((pa, pb), sv)| {
            let l1 = pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch;
            (1.0 - w.alpha) * l1 + 0.5 * w.alpha * (1.0 - sv)
        })
        .collect();
    Ok(ScalarField {
        height: a.height,
        width: a.width,
        data,
    })
}

/// Photometric residual of the warped source against the target.
pub fn photometric_loss(pair: &FramePair, w: &LossWeights) -> Result<ScalarField> {
    Ok(evaluate(pair, w, None)?.photo_map)
}

/// Feature residual on the pair's selected feature channel.
pub fn feature_loss(pair: &FramePair, w: &LossWeights) -> Result<ScalarField> {
    Ok(evaluate(pair, w, None)?.feat_map)
}

pub fn depth_consistency_loss(pair: &FramePair, w: &LossWeights) -> Result<ScalarField> {
    Ok(evaluate(pair, w, None)?.depth_map)
}

pub fn normal_consistency_loss(pair: &FramePair, w: &LossWeights) -> Result<ScalarField> {
    Ok(evaluate(pair, w, None)?.norm_map)
}

pub fn auto_mask(pair: &FramePair, w: &LossWeights) -> Result<Mask> {
    Ok(evaluate(pair, w, None)?.masks.auto)
}

pub fn total_loss(pair: &FramePair, w: &LossWeights) -> Result<LossBreakdown> {
    Ok(evaluate(pair, w, None)?.breakdown)
}

/// `|a - b| / (a + b)`.
#[inline]
pub fn depth_consistency(sampled: f64, projected: f64) -> f64 {
    (sampled - projected).abs() / (sampled + projected)
}

/// Sum of absolute component differences between `sampled` and `transported`.
#[inline]
pub fn normal_consistency(sampled: &Vector3<f64>, transported: &Vector3<f64>) -> f64 {
    (sampled - transported).abs().sum()
}

/// Keep-mask: false on saturated pixels (max channel above the threshold),
/// dilated by a square of radius `spec_dilate`.
pub fn specular_mask(img: &Image, w: &LossWeights) -> Mask {
    let (h, wd) = img.shape();
    let saturated: Vec<bool> = img
        .data
        .chunks_exact(img.channels)
        .map(|px| px.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > w.spec_threshold)
        .collect();
    let r = w.spec_dilate as isize;
    let mut keep = vec![true; h * wd];
    for i in 0..h as isize {
        for j in 0..wd as isize {
            if !saturated[(i as usize) * wd + j as usize] {
                continue;
            }
            for ii in (i - r).max(0)..=(i + r).min(h as isize - 1) {
                for jj in (j - r).max(0)..=(j + r).min(wd as isize - 1) {
                    keep[ii as usize * wd + jj as usize] = false;
                }
            }
        }
    }
    Mask {
        height: h,
        width: wd,
        data: keep,
    }
}

/// Backprojected points of every pixel.
pub(crate) fn point_cloud_of(depth: &DepthField, k: &Intrinsics) -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(depth.data.len());
    for i in 0..depth.height {
        for j in 0..depth.width {
            pts.push(k.ray(Vector2::new(j as f64, i as f64)) * depth.at(i, j));
        }
    }
    pts
}

/// Flat indices `(a, b)` of the two diagonal pairs around interior pixel `(i, j)`:
/// top-left/bottom-right and top-right/bottom-left.
#[inline]
pub(crate) fn diagonal_pairs(i: usize, j: usize, w: usize) -> [(usize, usize); 2] {
    [
        ((i - 1) * w + (j - 1), (i + 1) * w + (j + 1)),
        ((i - 1) * w + (j + 1), (i + 1) * w + (j - 1)),
    ]
}

/// Surface vectors `D(a)K⁻¹ã - D(b)K⁻¹b̃` of the two diagonal neighbour pairs,
/// or `None` on the image border.
pub fn surface_vectors(
    depth: &DepthField,
    k: &Intrinsics,
    row: usize,
    col: usize,
) -> Result<Option<[Vector3<f64>; 2]>> {
    check_shape("depth", depth.shape(), k)?;
    if row == 0 || col == 0 || row + 1 >= depth.height || col + 1 >= depth.width {
        return Ok(None);
    }
    let point = |idx: usize| {
        let (i, j) = (idx / depth.width, idx % depth.width);
        k.ray(Vector2::new(j as f64, i as f64)) * depth.data[idx]
    };
    let pairs = diagonal_pairs(row, col, depth.width);
    Ok(Some(pairs.map(|(a, b)| point(a) - point(b))))
}

/// Mean of `|N(p) · V̂(p)|` over interior pixels and both diagonal pairs,
/// with `V̂` the unit surface vector. Zero when there is no interior pixel.
pub fn orthogonality_loss(depth: &DepthField, normals: &NormalField, k: &Intrinsics) -> Result<f64> {
    check_shape("depth", depth.shape(), k)?;
    check_shape("normals", normals.shape(), k)?;
    Ok(orthogonality_value(depth, normals, k))
}

pub(crate) fn orthogonality_value(depth: &DepthField, normals: &NormalField, k: &Intrinsics) -> f64 {
    let (h, w) = depth.shape();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let pts = point_cloud_of(depth, k);
    let mut sum = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let n = normals.data[i * w + j];
            for (a, b) in diagonal_pairs(i, j, w) {
                let v = pts[a] - pts[b];
                let len = v.norm();
                if len > 0.0 {
                    sum += n.dot(&(v / len)).abs();
                }
            }
        }
    }
    sum / (2 * (h - 2) * (w - 2)) as f64
}

/// Edge-aware smoothness of mean-normalised inverse depth:
/// `mean_x |∂x d*|·exp(-|∂x I|) + mean_y |∂y d*|·exp(-|∂y I|)`.
pub fn smoothness_loss(depth: &DepthField, img: &Image) -> Result<f64> {
    if depth.shape() != img.shape() {
        return Err(Error::ShapeMismatch(format!(
            "depth {:?} vs image {:?}",
            depth.shape(),
            img.shape()
        )));
    }
    Ok(smoothness_value(depth, img))
}

/// Edge weights `exp(-mean_c |ΔI|)` along x (h×(w-1)) and y ((h-1)×w).
pub(crate) fn edge_weights(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let diff = |a: &[f64], b: &[f64]| {
        (-(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch as f64)).exp()
    };
    let mut wx = Vec::with_capacity(h * w.saturating_sub(1));
    for i in 0..h {
        for j in 0..w.saturating_sub(1) {
            wx.push(diff(img.pixel(i, j + 1), img.pixel(i, j)));
        }
    }
    let mut wy = Vec::with_capacity(h.saturating_sub(1) * w);
    for i in 0..h.saturating_sub(1) {
        for j in 0..w {
            wy.push(diff(img.pixel(i + 1, j), img.pixel(i, j)));
        }
    }
    (wx, wy)
}

pub(crate) fn normalized_disparity(depth: &DepthField) -> (Vec<f64>, f64) {
    let inv: Vec<f64> = depth.data.iter().map(|d| 1.0 / d).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    (inv.iter().map(|v| v / mean).collect(), mean)
}

pub(crate) fn smoothness_value(depth: &DepthField, img: &Image) -> f64 {
    let (h, w) = depth.shape();
    let (disp, _) = normalized_disparity(depth);
    let (wx, wy) = edge_weights(img);
    let mut total = 0.0;
    if w > 1 {
        let mut sx = 0.0;
        for i in 0..h {
            for j in 0..w - 1 {
                sx += (disp[i * w + j + 1] - disp[i * w + j]).abs() * wx[i * (w - 1) + j];
            }
        }
        total += sx / (h * (w - 1)) as f64;
    }
    if h > 1 {
        let mut sy = 0.0;
        for i in 0..h - 1 {
            for j in 0..w {
                sy += (disp[(i + 1) * w + j] - disp[i * w + j]).abs() * wy[i * w + j];
            }
        }
        total += sy / ((h - 1) * w) as f64;
    }
    total
}

fn nearest(q: Vector2<f64>, w: usize, h: usize) -> usize {
    let j = (q.x.round() as usize).min(w - 1);
    let i = (q.y.round() as usize).min(h - 1);
    i * w + j
}

/// Evaluates every term of the pair. With `frozen`, the combined mask is
/// taken from it (intersected with the current validity) instead of being
/// recomputed.
pub fn evaluate(pair: &FramePair, w: &LossWeights, frozen: Option<&Mask>) -> Result<PairEvaluation> {
    pair.validate()?;
    w.validate()?;
    let k = &pair.intrinsics;
    let (h, wd) = (k.height, k.width);
    let n = h * wd;
    let tgt = pair.target;
    let src = pair.source;
    let ch = src.image.channels;
    let pose = &pair.pose_t_to_s;

    let (fh, fw) = src.features.shape();
    let feature_scale = Vector2::new(coordinate_scale(wd, fw)?, coordinate_scale(h, fh)?);
    let fc = pair.feature_channel;
    let src_feat = src.features.channel(fc);
    let tgt_feat = tgt.features.channel(fc);

    let mut projections = Vec::with_capacity(n);
    let mut taps = Vec::with_capacity(n);
    let mut feature_lookups = Vec::with_capacity(n);
    let mut warped = vec![0.0; n * ch];
    let mut warped_feature = vec![0.0; n];
    let mut target_feature = Vec::with_capacity(n);
    let mut sampled_depth = vec![0.0; n];
    let mut sampled_normals = vec![Vector3::zeros(); n];
    let mut rotated_normals = Vec::with_capacity(n);

    for i in 0..h {
        for j in 0..wd {
            let p = i * wd + j;
            let q = Vector2::new(j as f64, i as f64);
            let proj = project_point(q, tgt.depth.data[p], pose, k);
            let tap = if proj.in_front {
                BilinearTap::new(proj.coord, wd, h)
            } else {
                None
            };
            let tl = FeatureLookup::new(q, feature_scale, fw, fh);
            target_feature.push(tl.tap.interpolate(tl.tap.indices(fw).map(|t| tgt_feat[t])));
            rotated_normals.push(pose.rotate(&tgt.normals.data[p]));
            let lookup = tap.map(|tap| {
                let idx = tap.indices(wd);
                for c in 0..ch {
                    warped[p * ch + c] =
                        tap.interpolate(idx.map(|t| src.image.data[t * ch + c]));
                }
                sampled_depth[p] = tap.interpolate(idx.map(|t| src.depth.data[t]));
                let wts = tap.weights();
                sampled_normals[p] = idx
                    .iter()
                    .zip(wts)
                    .fold(Vector3::zeros(), |acc, (&t, wt)| acc + src.normals.data[t] * wt);
                let fl = FeatureLookup::new(proj.coord, feature_scale, fw, fh);
                warped_feature[p] = fl.tap.interpolate(fl.tap.indices(fw).map(|t| src_feat[t]));
                fl
            });
            projections.push(proj);
            taps.push(tap);
            feature_lookups.push(lookup);
        }
    }

    let warped = Image {
        height: h,
        width: wd,
        channels: ch,
        data: warped,
    };
    let photo_map = photometric_map(&warped, &tgt.image, w)?;
    let fs = ssim_plane(&warped_feature, &target_feature, h, wd, w.ssim_c1, w.ssim_c2);
    let feat_map = ScalarField {
        height: h,
        width: wd,
        data: fs.iter().map(|s| 0.5 * w.alpha * (1.0 - s)).collect(),
    };
    let mut depth_map = ScalarField::zeros(h, wd);
    let mut norm_map = ScalarField::zeros(h, wd);
    for p in 0..n {
        if taps[p].is_some() {
            depth_map.data[p] = depth_consistency(sampled_depth[p], projections[p].depth);
            norm_map.data[p] = normal_consistency(&sampled_normals[p], &rotated_normals[p]);
        }
    }

    let valid = Mask {
        height: h,
        width: wd,
        data: taps.iter().map(Option::is_some).collect(),
    };
    let identity_map = photometric_map(&src.image, &tgt.image, w)?;
    let auto = Mask {
        height: h,
        width: wd,
        data: photo_map
            .data
            .iter()
            .zip(&identity_map.data)
            .map(|(a, b)| a < b)
            .collect(),
    };
    let spec_t = specular_mask(&tgt.image, w);
    let spec_s = specular_mask(&src.image, w);
    let specular = Mask {
        height: h,
        width: wd,
        data: (0..n)
            .map(|p| {
                spec_t.data[p]
                    && taps[p].is_none_or(|_| spec_s.data[nearest(projections[p].coord, wd, h)])
            })
            .collect(),
    };
    let combined = match frozen {
        Some(m) => {
            if (m.height, m.width) != (h, wd) {
                return Err(Error::ShapeMismatch("frozen mask shape".into()));
            }
            m.and(&valid)
        }
        None => valid.and(&auto).and(&specular),
    };

    let count = combined.count();
    let masked_mean = |map: &ScalarField| -> f64 {
        if count == 0 {
            return 0.0;
        }
        map.data
            .iter()
            .zip(&combined.data)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum::<f64>()
            / count as f64
    };
    let orth_target = orthogonality_value(&tgt.depth, &tgt.normals, k);
    let orth_source = orthogonality_value(&src.depth, &src.normals, k);
    let smooth_target = smoothness_value(&tgt.depth, &tgt.image);
    let smooth_source = smoothness_value(&src.depth, &src.image);

    let mut breakdown = LossBreakdown {
        photo: masked_mean(&photo_map),
        feat: masked_mean(&feat_map),
        depth: masked_mean(&depth_map),
        norm: masked_mean(&norm_map),
        orth: 0.5 * (orth_target + orth_source),
        smooth: 0.5 * (smooth_target + smooth_source),
        total: 0.0,
        masked_pixel_count: count,
        empty_mask: count == 0,
    };
    breakdown.total = breakdown.recompose(w);
    for (term, v) in [
        ("photo", breakdown.photo),
        ("feat", breakdown.feat),
        ("depth", breakdown.depth),
        ("norm", breakdown.norm),
        ("orth", breakdown.orth),
        ("smooth", breakdown.smooth),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term });
        }
    }

    Ok(PairEvaluation {
        height: h,
        width: wd,
        projections,
        taps,
        feature_lookups,
        warped,
        warped_feature,
        target_feature,
        sampled_depth,
        sampled_normals,
        rotated_normals,
        photo_map,
        feat_map,
        depth_map,
        norm_map,
        masks: PairMasks {
            valid,
            auto,
            specular,
            combined,
        },
        orth_target,
        orth_source,
        smooth_target,
        smooth_source,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn plane_frame(h: usize, w: usize, depth: f64, img: Image) -> Frame {
        Frame::new(
            img,
            DepthField::constant(h, w, depth),
            NormalField::constant(h, w, Vector3::new(0.0, 0.0, -1.0)),
        )
        .unwrap()
    }

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |i, j, c| {
            0.5 + 0.3 * ((i as f64 * 0.7 + c as f64).sin() * (j as f64 * 0.5).cos())
        })
    }

    #[test]
    fn default_weights_round_trip_json() {
        let w = LossWeights::default();
        let s = serde_json::to_string(&w).unwrap();
        for key in [
            "alpha", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "ssim_c1", "ssim_c2",
            "spec_threshold", "spec_dilate",
        ] {
            assert!(s.contains(&format!("\"{key}\"")), "{key}");
        }
        let back: LossWeights = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
        assert!(serde_json::from_str::<LossWeights>(&s.replace("alpha", "alfa")).is_err());
    }

    #[test]
    fn weights_validation() {
        let mut w = LossWeights::default();
        w.alpha = 1.5;
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.lambda3 = -0.1;
        assert!(w.validate().is_err());
    }

    #[test]
    fn depth_consistency_values() {
        assert_abs_diff_eq!(depth_consistency(3.0, 1.0), 0.5);
        assert_eq!(depth_consistency(2.0, 2.0), 0.0);
        assert_eq!(depth_consistency(1.0, 3.0), depth_consistency(3.0, 1.0));
    }

    #[test]
    fn normal_consistency_values() {
        let r = PoseSE3::from_axis_angle(
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        );
        let nt = Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(
            normal_consistency(&Vector3::new(0.0, 1.0, 0.0), &r.rotate(&nt)),
            0.0,
            epsilon = 1e-15
        );
        assert_eq!(normal_consistency(&-nt, &nt), 2.0);
        assert_eq!(normal_consistency(&nt, &nt), 0.0);
    }

    #[test]
    fn specular_mask_dilation() {
        let dark = Image::filled(9, 9, 3, 0.2);
        assert_eq!(specular_mask(&dark, &LossWeights::default()).count(), 81);
        let mut img = dark.clone();
        for c in 0..3 {
            *img.at_mut(4, 5, c) = if c == 1 { 1.0 } else { 0.1 };
        }
        let m = specular_mask(&img, &LossWeights::default());
        for i in 0..9 {
            for j in 0..9 {
                let inside = (2..=6).contains(&i) && (3..=7).contains(&j);
                assert_eq!(m.at(i, j), !inside, "({i},{j})");
            }
        }
        assert_eq!(81 - m.count(), 25);
    }

    #[test]
    fn surface_vectors_fronto_parallel_and_border() {
        let k = Intrinsics::from_fov(6, 5, 60.0).unwrap();
        let d = DepthField::constant(5, 6, 2.0);
        let v = surface_vectors(&d, &k, 2, 2).unwrap().unwrap();
        assert_eq!(v[0].z, 0.0);
        assert_eq!(v[1].z, 0.0);
        assert!(surface_vectors(&d, &k, 0, 2).unwrap().is_none());
        let k2 = Intrinsics::from_fov(2, 2, 60.0).unwrap();
        let d2 = DepthField::constant(2, 2, 1.0);
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!(surface_vectors(&d2, &k2, i, j).unwrap().is_none());
        }
        let n2 = NormalField::constant(2, 2, Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(orthogonality_loss(&d2, &n2, &k2).unwrap(), 0.0);
    }

    #[test]
    fn surface_vectors_on_depth_ramp() {
        let k = Intrinsics::from_fov(7, 6, 70.0).unwrap();
        let d = DepthField::from_fn(6, 7, |i, _| 1.5 + 0.1 * i as f64).unwrap();
        let back = |i: usize, j: usize| {
            let ray = (k.matrix().try_inverse().unwrap()) * Vector3::new(j as f64, i as f64, 1.0);
            ray * d.at(i, j)
        };
        let v = surface_vectors(&d, &k, 3, 2).unwrap().unwrap();
        assert_abs_diff_eq!(v[0], back(2, 1) - back(4, 3), epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], back(2, 3) - back(4, 1), epsilon = 1e-12);
        assert_abs_diff_eq!(v[0].z, -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1].z, -0.2, epsilon = 1e-12);
    }

    #[test]
    fn orthogonality_on_planes() {
        let k = Intrinsics::new(40.0, 40.0, 5.0, 4.0, 10, 8).unwrap();
        let d = DepthField::constant(8, 10, 3.0);
        let axis = NormalField::constant(8, 10, Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(orthogonality_loss(&d, &axis, &k).unwrap(), 0.0);
        let tilted = NormalField::constant(8, 10, Vector3::new(FRAC_1_SQRT_2, 0.0, -FRAC_1_SQRT_2));
        // Diagonal surface vectors are (±1/fx, ±1/fy, 0) up to scale.
        let expected = FRAC_1_SQRT_2 * (1.0 / k.fx) / (1.0 / k.fx.powi(2) + 1.0 / k.fy.powi(2)).sqrt();
        assert_abs_diff_eq!(orthogonality_loss(&d, &tilted, &k).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_cases() {
        let img = Image::filled(6, 8, 3, 0.5);
        assert_eq!(smoothness_loss(&DepthField::constant(6, 8, 2.0), &img).unwrap(), 0.0);
        let ramp = DepthField::from_fn(6, 8, |_, j| 1.0 + 0.2 * j as f64).unwrap();
        let flat = smoothness_loss(&ramp, &img).unwrap();
        // Closed form: mean |Δx d*| over x-neighbours, y-differences vanish.
        let inv: Vec<f64> = (0..8).map(|j| 1.0 / (1.0 + 0.2 * j as f64)).collect();
        let mean = inv.iter().sum::<f64>() / 8.0;
        let expected = (0..7).map(|j| (inv[j + 1] - inv[j]).abs() / mean).sum::<f64>() / 7.0;
        assert!(flat > 0.0);
        assert_abs_diff_eq!(flat, expected, epsilon = 1e-14);
        let edged = Image::from_fn(6, 8, 3, |_, j, _| if j % 2 == 0 { 0.0 } else { 1.0 });
        assert!(smoothness_loss(&ramp, &edged).unwrap() < flat);
    }

    #[test]
    fn photometric_closed_form_constant_images() {
        let w = LossWeights::default();
        let a = Image::filled(5, 5, 3, 0.0);
        let b = Image::filled(5, 5, 3, 1.0);
        let m = photometric_map(&a, &b, &w).unwrap();
        let c1 = w.ssim_c1;
        let expected = (1.0 - 0.85) + 0.425 * (1.0 - c1 / (1.0 + c1));
        for v in m.data {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-14);
        }
        let z = photometric_map(&b, &b, &w).unwrap();
        assert!(z.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identity_pair_terms() {
        let (h, wd) = (12, 14);
        let k = Intrinsics::from_fov(wd, h, 80.0).unwrap();
        let f = plane_frame(h, wd, 2.0, textured(h, wd));
        let w = LossWeights::default();
        let pair = FramePair::new(&f, &f, PoseSE3::identity(), k, 5).unwrap();
        let ev = evaluate(&pair, &w, None).unwrap();
        assert_eq!(ev.masks.valid.count(), h * wd);
        assert_eq!(ev.warped, f.image);
        assert!(ev.feat_map.data.iter().all(|v| v.abs() < 1e-12));
        assert!(ev.depth_map.data.iter().all(|v| *v == 0.0));
        assert!(ev.norm_map.data.iter().all(|v| *v == 0.0));
        // Warping cannot beat the zero identity residual.
        assert_eq!(ev.masks.auto.count(), 0);
        assert!(ev.breakdown.empty_mask);
        assert_abs_diff_eq!(ev.breakdown.total, w.lambda5 * ev.breakdown.smooth, epsilon = 1e-15);
        assert_eq!(ev.breakdown.orth, 0.0);
    }

    #[test]
    fn feature_channel_out_of_range() {
        let (h, wd) = (8, 8);
        let k = Intrinsics::from_fov(wd, h, 80.0).unwrap();
        let f = plane_frame(h, wd, 2.0, textured(h, wd));
        assert!(FramePair::new(&f, &f, PoseSE3::identity(), k, 64).is_err());
        let pair = FramePair {
            target: &f,
            source: &f,
            pose_t_to_s: PoseSE3::identity(),
            intrinsics: k,
            feature_channel: 99,
        };
        assert!(matches!(
            feature_loss(&pair, &LossWeights::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_weights_total_is_photometric_mean() {
        let (h, wd) = (10, 12);
        let k = Intrinsics::from_fov(wd, h, 80.0).unwrap();
        let t = plane_frame(h, wd, 2.0, textured(h, wd));
        let s = plane_frame(h, wd, 2.0, textured(h, wd).clone());
        let pose = PoseSE3::from_translation(Vector3::new(0.05, 0.0, 0.0));
        let pair = FramePair::new(&t, &s, pose, k, 0).unwrap();
        let mut w = LossWeights::photometric_only();
        w.alpha = 0.85;
        let ev = evaluate(&pair, &w, None).unwrap();
        let m = &ev.masks.combined;
        let mean = ev
            .photo_map
            .data
            .iter()
            .zip(&m.data)
            .filter(|(_, k)| **k)
            .map(|(v, _)| v)
            .sum::<f64>()
            / m.count().max(1) as f64;
        assert_eq!(ev.breakdown.total, mean);
    }
}
