//! Exact gradients of the pair objective and a central-difference oracle.
//!
//! Masks are held fixed while differentiating. Pose gradients are taken with
//! respect to a left perturbation `T ← exp(δ)·T` with `δ = (ω, v)`.

use nalgebra::{Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthField, Mask, NormalField, PoseSE3, ScalarField};
use crate::objectives::{
    diagonal_pairs, edge_weights, evaluate, normalized_disparity, point_cloud_of, Frame, FramePair,
    LossWeights, PairEvaluation,
};
use crate::ssim::ssim_plane_backward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wrt {
    Depth,
    Normals,
    Pose,
    All,
}

impl Wrt {
    fn depth(self) -> bool {
        matches!(self, Wrt::Depth | Wrt::All)
    }
    fn normals(self) -> bool {
        matches!(self, Wrt::Normals | Wrt::All)
    }
    fn pose(self) -> bool {
        matches!(self, Wrt::Pose | Wrt::All)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_target_depth: ScalarField,
    pub d_source_depth: ScalarField,
    pub d_target_normals: Vec<Vector3<f64>>,
    pub d_source_normals: Vec<Vector3<f64>>,
    pub d_pose: Vector6<f64>,
    pub loss_value: f64,
}

impl GradientBundle {
    pub fn zeros(h: usize, w: usize) -> Self {
        GradientBundle {
            d_target_depth: ScalarField::zeros(h, w),
            d_source_depth: ScalarField::zeros(h, w),
            d_target_normals: vec![Vector3::zeros(); h * w],
            d_source_normals: vec![Vector3::zeros(); h * w],
            d_pose: Vector6::zeros(),
            loss_value: 0.0,
        }
    }

    fn restrict(mut self, wrt: Wrt) -> Self {
        if !wrt.depth() {
            self.d_target_depth.data.iter_mut().for_each(|g| *g = 0.0);
            self.d_source_depth.data.iter_mut().for_each(|g| *g = 0.0);
        }
        if !wrt.normals() {
            self.d_target_normals.iter_mut().for_each(|g| *g = Vector3::zeros());
            self.d_source_normals.iter_mut().for_each(|g| *g = Vector3::zeros());
        }
        if !wrt.pose() {
            self.d_pose = Vector6::zeros();
        }
        self
    }

    fn check_finite(&self) -> Result<()> {
        let depth_ok = self
            .d_target_depth
            .data
            .iter()
            .chain(&self.d_source_depth.data)
            .all(|v| v.is_finite());
        if !depth_ok {
            return Err(Error::NonFinite { term: "depth gradient" });
        }
        let normals_ok = self
            .d_target_normals
            .iter()
            .chain(&self.d_source_normals)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !normals_ok {
            return Err(Error::NonFinite { term: "normal gradient" });
        }
        if !self.d_pose.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { term: "pose gradient" });
        }
        Ok(())
    }
}

/// Removes the radial component of each normal gradient so a step stays
/// tangent to the unit sphere.
pub fn project_to_tangent(normals: &NormalField, grads: &mut [Vector3<f64>]) {
    for (n, g) in normals.data.iter().zip(grads.iter_mut()) {
        let nn = n.norm_squared();
        if nn > 0.0 {
            *g -= *n * (n.dot(g) / nn);
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the pair objective with the masks computed at the current point.
pub fn grad_total_loss(pair: &FramePair, w: &LossWeights, wrt: Wrt) -> Result<GradientBundle> {
    let ev = evaluate(pair, w, None)?;
    let g = backward(pair, w, &ev)?;
    Ok(g.restrict(wrt))
}

/// Gradient of the pair objective with a caller-supplied combined mask.
pub fn grad_total_loss_frozen(
    pair: &FramePair,
    w: &LossWeights,
    wrt: Wrt,
    mask: &Mask,
) -> Result<GradientBundle> {
    let ev = evaluate(pair, w, Some(mask))?;
    Ok(backward(pair, w, &ev)?.restrict(wrt))
}

/// Adjoint pass over a completed evaluation.
pub fn backward(pair: &FramePair, w: &LossWeights, ev: &PairEvaluation) -> Result<GradientBundle> {
    let k = &pair.intrinsics;
    let (h, wd) = (ev.height, ev.width);
    let n = h * wd;
    let ch = ev.warped.channels;
    let tgt = pair.target;
    let src = pair.source;
    let rot = pair.pose_t_to_s.rotation;
    let mut out = GradientBundle::zeros(h, wd);
    out.loss_value = ev.breakdown.total;

    let mask = &ev.masks.combined.data;
    let count = ev.breakdown.masked_pixel_count;
    let mut g_warped = vec![0.0; n * ch];
    let mut g_wfeat = vec![0.0; n];
    let mut g_sdepth = vec![0.0; n];
    let mut g_pdepth = vec![0.0; n];
    let mut g_snormal = vec![Vector3::zeros(); n];
    let mut g_rnormal = vec![Vector3::zeros(); n];

    if count > 0 {
        let gm = 1.0 / count as f64;
        let l1_scale = (1.0 - w.alpha) / ch as f64 * gm;
        let mut up_photo = vec![0.0; n];
        let mut up_feat = vec![0.0; n];
        for p in 0..n {
            if !mask[p] {
                continue;
            }
            for c in 0..ch {
                let d = ev.warped.data[p * ch + c] - tgt.image.data[p * ch + c];
                g_warped[p * ch + c] += l1_scale * sign(d);
            }
            up_photo[p] = -0.5 * w.alpha / ch as f64 * gm;
            up_feat[p] = -0.5 * w.alpha * w.lambda1 * gm;

            let a = ev.sampled_depth[p];
            let b = ev.projections[p].depth;
            let s = sign(a - b) * w.lambda2 * gm;
            let den = (a + b) * (a + b);
            g_sdepth[p] += s * 2.0 * b / den;
            g_pdepth[p] -= s * 2.0 * a / den;

            let diff = ev.sampled_normals[p] - ev.rotated_normals[p];
            let sg = diff.map(sign) * (w.lambda3 * gm);
            g_snormal[p] += sg;
            g_rnormal[p] -= sg;
        }
        let target_planes: Vec<Vec<f64>> = (0..ch).map(|c| tgt.image.channel(c)).collect();
        for (c, target_plane) in target_planes.iter().enumerate() {
            let x = ev.warped.channel(c);
            let mut gx = vec![0.0; n];
            ssim_plane_backward(&x, target_plane, h, wd, w.ssim_c1, w.ssim_c2, &up_photo, &mut gx);
            for p in 0..n {
                g_warped[p * ch + c] += gx[p];
            }
        }
        if w.lambda1 != 0.0 {
            ssim_plane_backward(
                &ev.warped_feature,
                &ev.target_feature,
                h,
                wd,
                w.ssim_c1,
                w.ssim_c2,
                &up_feat,
                &mut g_wfeat,
            );
        }
    }

    let fw = src.features.width;
    let src_feat = src.features.channel(pair.feature_channel);
    for i in 0..h {
        for j in 0..wd {
            let p = i * wd + j;
            // Target normals enter through R·N_t whether or not the pixel projects.
            let gr = g_rnormal[p];
            if gr != Vector3::zeros() {
                out.d_target_normals[p] += rot.transpose() * gr;
                let rn = ev.rotated_normals[p];
                let gw = rn.cross(&gr);
                out.d_pose[0] += gw.x;
                out.d_pose[1] += gw.y;
                out.d_pose[2] += gw.z;
            }
            let Some(tap) = ev.taps[p] else { continue };
            let idx = tap.indices(wd);
            let wts = tap.weights();

            let mut gq = Vector2::zeros();
            for c in 0..ch {
                let g = g_warped[p * ch + c];
                if g != 0.0 {
                    gq += tap.gradient(idx.map(|t| src.image.data[t * ch + c])) * g;
                }
            }
            if g_wfeat[p] != 0.0 {
                let fl = ev.feature_lookups[p].expect("valid pixel has a feature lookup");
                let gf = fl.tap.gradient(fl.tap.indices(fw).map(|t| src_feat[t]));
                gq += gf.component_mul(&fl.jacobian) * g_wfeat[p];
            }
            if g_sdepth[p] != 0.0 {
                gq += tap.gradient(idx.map(|t| src.depth.data[t])) * g_sdepth[p];
                for (t, wt) in idx.iter().zip(wts) {
                    out.d_source_depth.data[*t] += g_sdepth[p] * wt;
                }
            }
            let gs = g_snormal[p];
            if gs != Vector3::zeros() {
                for comp in 0..3 {
                    gq += tap.gradient(idx.map(|t| src.normals.data[t][comp])) * gs[comp];
                }
                for (t, wt) in idx.iter().zip(wts) {
                    out.d_source_normals[*t] += gs * wt;
                }
            }

            let y = ev.projections[p].point;
            let gpd = g_pdepth[p];
            if gq == Vector2::zeros() && gpd == 0.0 {
                continue;
            }
            let iz = 1.0 / y.z;
            let gy = Vector3::new(
                gq.x * k.fx * iz,
                gq.y * k.fy * iz,
                -(gq.x * k.fx * y.x + gq.y * k.fy * y.y) * iz * iz + gpd,
            );
            let ray = k.ray(Vector2::new(j as f64, i as f64));
            out.d_target_depth.data[p] += gy.dot(&(rot * ray));
            let gw = y.cross(&gy);
            out.d_pose[0] += gw.x;
            out.d_pose[1] += gw.y;
            out.d_pose[2] += gw.z;
            out.d_pose[3] += gy.x;
            out.d_pose[4] += gy.y;
            out.d_pose[5] += gy.z;
        }
    }

    let prior_weight = 0.5;
    if w.lambda4 != 0.0 {
        orthogonality_backward(
            &tgt.depth,
            &tgt.normals,
            pair,
            w.lambda4 * prior_weight,
            &mut out.d_target_depth.data,
            &mut out.d_target_normals,
        );
        orthogonality_backward(
            &src.depth,
            &src.normals,
            pair,
            w.lambda4 * prior_weight,
            &mut out.d_source_depth.data,
            &mut out.d_source_normals,
        );
    }
    if w.lambda5 != 0.0 {
        smoothness_backward(tgt, w.lambda5 * prior_weight, &mut out.d_target_depth.data);
        smoothness_backward(src, w.lambda5 * prior_weight, &mut out.d_source_depth.data);
    }
    out.check_finite()?;
    Ok(out)
}

fn orthogonality_backward(
    depth: &DepthField,
    normals: &NormalField,
    pair: &FramePair,
    scale: f64,
    g_depth: &mut [f64],
    g_normals: &mut [Vector3<f64>],
) {
    let k = &pair.intrinsics;
    let (h, w) = depth.shape();
    if h < 3 || w < 3 {
        return;
    }
    let pts = point_cloud_of(depth, k);
    let ray = |idx: usize| k.ray(Vector2::new((idx % w) as f64, (idx / w) as f64));
    let c = scale / (2 * (h - 2) * (w - 2)) as f64;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let p = i * w + j;
            let nrm = normals.data[p];
            for (a, b) in diagonal_pairs(i, j, w) {
                let v = pts[a] - pts[b];
                let len = v.norm();
                if len == 0.0 {
                    continue;
                }
                let vh = v / len;
                let s = sign(nrm.dot(&vh)) * c;
                g_normals[p] += vh * s;
                let g_vh = nrm * s;
                let g_v = (g_vh - vh * vh.dot(&g_vh)) / len;
                g_depth[a] += g_v.dot(&ray(a));
                g_depth[b] -= g_v.dot(&ray(b));
            }
        }
    }
}

fn smoothness_backward(frame: &Frame, scale: f64, g_depth: &mut [f64]) {
    let (h, w) = frame.depth.shape();
    let n = h * w;
    let (disp, mean) = normalized_disparity(&frame.depth);
    let (wx, wy) = edge_weights(&frame.image);
    let mut g_disp = vec![0.0; n];
    if w > 1 {
        let c = scale / (h * (w - 1)) as f64;
        for i in 0..h {
            for j in 0..w - 1 {
                let (a, b) = (i * w + j + 1, i * w + j);
                let g = sign(disp[a] - disp[b]) * wx[i * (w - 1) + j] * c;
                g_disp[a] += g;
                g_disp[b] -= g;
            }
        }
    }
    if h > 1 {
        let c = scale / ((h - 1) * w) as f64;
        for i in 0..h - 1 {
            for j in 0..w {
                let (a, b) = ((i + 1) * w + j, i * w + j);
                let g = sign(disp[a] - disp[b]) * wy[i * w + j] * c;
                g_disp[a] += g;
                g_disp[b] -= g;
            }
        }
    }
    // disp = inv / mean(inv)
    let coupling = g_disp.iter().zip(&disp).map(|(g, d)| g * d).sum::<f64>() / n as f64;
    for p in 0..n {
        let g_inv = (g_disp[p] - coupling) / mean;
        let d = frame.depth.data[p];
        g_depth[p] -= g_inv / (d * d);
    }
}

/// Central differences of `f` at `x`, coordinate by coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let fp = f(&work);
            work[i] = orig - step;
            let fm = f(&work);
            work[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// One scalar unknown of the pair objective; pixel indices are row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    TargetDepth(usize),
    SourceDepth(usize),
    TargetNormal(usize, usize),
    SourceNormal(usize, usize),
    Pose(usize),
}

impl GradientBundle {
    pub fn component(&self, c: Coordinate) -> f64 {
        match c {
            Coordinate::TargetDepth(p) => self.d_target_depth.data[p],
            Coordinate::SourceDepth(p) => self.d_source_depth.data[p],
            Coordinate::TargetNormal(p, k) => self.d_target_normals[p][k],
            Coordinate::SourceNormal(p, k) => self.d_source_normals[p][k],
            Coordinate::Pose(k) => self.d_pose[k],
        }
    }
}

/// Central differences of the pair objective along selected coordinates,
/// with masks frozen at the unperturbed point. Depth coordinates use a
/// relative step `step·D(p)`; normal and pose coordinates use `step`
/// directly, the pose through a left perturbation `exp(δ)·T`.
pub fn fd_coordinates(pair: &FramePair, w: &LossWeights, coords: &[Coordinate], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {step}")));
    }
    let base = evaluate(pair, w, None)?;
    let mask = base.masks.combined.clone();
    let n = base.height * base.width;
    let mut target = pair.target.clone();
    let mut source = pair.source.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let in_range = match c {
            Coordinate::TargetDepth(p) | Coordinate::SourceDepth(p) => p < n,
            Coordinate::TargetNormal(p, k) | Coordinate::SourceNormal(p, k) => p < n && k < 3,
            Coordinate::Pose(k) => k < 6,
        };
        if !in_range {
            return Err(Error::InvalidInput(format!("coordinate {c:?} is outside a {n}-pixel pair")));
        }
        let h = match c {
            Coordinate::TargetDepth(p) => step * target.depth.data[p],
            Coordinate::SourceDepth(p) => step * source.depth.data[p],
            _ => step,
        };
        let mut at = |delta: f64| -> Result<f64> {
            let orig = unknown(&mut target, &mut source, c).map(|v| {
                let o = *v;
                *v += delta;
                o
            });
            let pose = match c {
                Coordinate::Pose(k) => {
                    let mut xi = Vector6::zeros();
                    xi[k] = delta;
                    PoseSE3::exp(&xi).compose(&pair.pose_t_to_s)
                }
                _ => pair.pose_t_to_s,
            };
            let p = FramePair {
                target: &target,
                source: &source,
                pose_t_to_s: pose,
                ..*pair
            };
            let value = evaluate(&p, w, Some(&mask)).map(|ev| ev.breakdown.total);
            if let (Some(o), Some(v)) = (orig, unknown(&mut target, &mut source, c)) {
                *v = o;
            }
            value
        };
        let fp = at(h)?;
        let fm = at(-h)?;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn unknown<'a>(target: &'a mut Frame, source: &'a mut Frame, c: Coordinate) -> Option<&'a mut f64> {
    match c {
        Coordinate::TargetDepth(p) => Some(&mut target.depth.data[p]),
        Coordinate::SourceDepth(p) => Some(&mut source.depth.data[p]),
        Coordinate::TargetNormal(p, k) => Some(&mut target.normals.data[p][k]),
        Coordinate::SourceNormal(p, k) => Some(&mut source.normals.data[p][k]),
        Coordinate::Pose(_) => None,
    }
}

/// Every coordinate selected by `wrt`, in bundle order.
pub fn coordinates(h: usize, w: usize, wrt: Wrt) -> Vec<Coordinate> {
    let n = h * w;
    let mut out = Vec::new();
    if wrt.depth() {
        out.extend((0..n).flat_map(|p| [Coordinate::TargetDepth(p), Coordinate::SourceDepth(p)]));
    }
    if wrt.normals() {
        out.extend((0..n).flat_map(|p| {
            (0..3).flat_map(move |k| [Coordinate::TargetNormal(p, k), Coordinate::SourceNormal(p, k)])
        }));
    }
    if wrt.pose() {
        out.extend((0..6).map(Coordinate::Pose));
    }
    out
}

/// Central-difference gradient of the pair objective over every coordinate
/// selected by `wrt`; see [`fd_coordinates`] for the step conventions.
pub fn fd_gradient(pair: &FramePair, w: &LossWeights, wrt: Wrt, step: f64) -> Result<GradientBundle> {
    let (h, wd) = pair.target.shape();
    let coords = coordinates(h, wd, wrt);
    let values = fd_coordinates(pair, w, &coords, step)?;
    let mut out = GradientBundle::zeros(h, wd);
    out.loss_value = evaluate(pair, w, None)?.breakdown.total;
    for (c, v) in coords.into_iter().zip(values) {
        match c {
            Coordinate::TargetDepth(p) => out.d_target_depth.data[p] = v,
            Coordinate::SourceDepth(p) => out.d_source_depth.data[p] = v,
            Coordinate::TargetNormal(p, k) => out.d_target_normals[p][k] = v,
            Coordinate::SourceNormal(p, k) => out.d_source_normals[p][k] = v,
            Coordinate::Pose(k) => out.d_pose[k] = v,
        }
    }
    Ok(out)
}
