//! Direct minimisation of the pair objective over depth and normal fields
//! with poses held fixed.
//!
//! Depth is updated in log space, so it stays positive. Each iteration takes
//! a steepest-descent step whose largest per-pixel change equals the current
//! step length, backtracking until the objective decreases.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FEATURE_CHANNELS;
use crate::geometry::{DepthField, Intrinsics, Mask, PoseSE3};
use crate::grad::{backward, project_to_tangent};
use crate::metrics::{compute_metrics, mean_metrics, DepthMetrics};
use crate::objectives::{evaluate, Frame, FramePair, LossBreakdown, LossWeights};
use crate::synth::relative_pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Largest per-pixel step: log-depth units for depth, radians-ish for normals.
    pub learning_rate: f64,
    pub optimize_depth: bool,
    pub optimize_normals: bool,
    /// Stop once the relative decrease of one accepted step falls below this.
    pub convergence_tol: f64,
    pub seed: u64,
    /// Use this feature channel throughout instead of resampling each iteration.
    pub fixed_feature_channel: Option<usize>,
    pub max_backtracks: usize,
    /// Step growth after an accepted step, capped at `max_step_factor · learning_rate`.
    pub step_growth: f64,
    pub max_step_factor: f64,
    /// Iterations cycle the depth direction through block averages of the
    /// gradient over `2^L, ..., 2, 1` pixel blocks; 0 gives plain steepest
    /// descent.
    pub multiscale_levels: usize,
    /// Directions are scaled so this quantile of per-pixel magnitudes
    /// moves by exactly one step; larger components are clipped.
    pub scale_quantile: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iters: 300,
            learning_rate: 1e-2,
            optimize_depth: true,
            optimize_normals: false,
            convergence_tol: 1e-6,
            seed: 0,
            fixed_feature_channel: None,
            max_backtracks: 30,
            step_growth: 1.5,
            max_step_factor: 8.0,
            multiscale_levels: 8,
            scale_quantile: 0.9,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.scale_quantile > 0.0 && self.scale_quantile <= 1.0) {
            return Err(Error::InvalidInput("scale_quantile must lie in (0, 1]".into()));
        }
        if !(self.step_growth >= 1.0 && self.max_step_factor >= 1.0) {
            return Err(Error::InvalidInput("step_growth and max_step_factor must be >= 1".into()));
        }
        if let Some(c) = self.fixed_feature_channel {
            if c >= FEATURE_CHANNELS {
                return Err(Error::InvalidInput(format!("feature channel {c} out of range")));
            }
        }
        if !self.optimize_depth && !self.optimize_normals {
            return Err(Error::InvalidInput("nothing to optimise".into()));
        }
        Ok(())
    }
}

/// Ground-truth depth with its validity mask, for reporting only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub depth: DepthField,
    pub valid: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub feature_channel: usize,
    /// Pair-averaged breakdown at the start of the iteration.
    pub loss: LossBreakdown,
    /// Objective after the accepted step (same feature channel), or the
    /// starting value when no step was accepted.
    pub accepted_total: f64,
    pub step: f64,
    pub backtracks: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub iterations: Vec<IterationRecord>,
    pub initial_metrics: Option<Vec<DepthMetrics>>,
    pub final_metrics: Option<Vec<DepthMetrics>>,
    pub initial_mean: Option<DepthMetrics>,
    pub final_mean: Option<DepthMetrics>,
    pub stop_reason: String,
}

impl RefineReport {
    pub fn initial_total(&self) -> Option<f64> {
        self.iterations.first().map(|r| r.loss.total)
    }

    pub fn final_total(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.accepted_total)
    }
}

/// One directed pair `target → source` inside a frame list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLink {
    pub target: usize,
    pub source: usize,
    pub pose_t_to_s: PoseSE3,
}

struct Objective<'a> {
    links: &'a [PairLink],
    k: Intrinsics,
    w: &'a LossWeights,
}

struct Evaluated {
    breakdown: LossBreakdown,
    depth_grads: Vec<Vec<f64>>,
    normal_grads: Vec<Vec<Vector3<f64>>>,
}

fn average(breakdowns: &[LossBreakdown]) -> LossBreakdown {
    let n = breakdowns.len() as f64;
    let mut out = LossBreakdown::default();
    for b in breakdowns {
        out.photo += b.photo / n;
        out.feat += b.feat / n;
        out.depth += b.depth / n;
        out.norm += b.norm / n;
        out.orth += b.orth / n;
        out.smooth += b.smooth / n;
        out.total += b.total / n;
        out.masked_pixel_count += b.masked_pixel_count;
        out.empty_mask |= b.empty_mask;
    }
    out
}

impl Objective<'_> {
    fn pair<'f>(&self, frames: &'f [Frame], link: &PairLink, channel: usize) -> FramePair<'f> {
        FramePair {
            target: &frames[link.target],
            source: &frames[link.source],
            pose_t_to_s: link.pose_t_to_s,
            intrinsics: self.k,
            feature_channel: channel,
        }
    }

    fn value(&self, frames: &[Frame], channel: usize) -> Result<f64> {
        let parts = self
            .links
            .par_iter()
            .map(|link| Ok(evaluate(&self.pair(frames, link, channel), self.w, None)?.breakdown))
            .collect::<Result<Vec<_>>>()?;
        Ok(average(&parts).total)
    }

    fn gradient(&self, frames: &[Frame], channel: usize) -> Result<Evaluated> {
        let parts = self
            .links
            .par_iter()
            .map(|link| {
                let pair = self.pair(frames, link, channel);
                let ev = evaluate(&pair, self.w, None)?;
                let g = backward(&pair, self.w, &ev)?;
                Ok((ev.breakdown, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.links.len() as f64;
        let mut depth_grads: Vec<Vec<f64>> = frames.iter().map(|f| vec![0.0; f.depth.data.len()]).collect();
        let mut normal_grads: Vec<Vec<Vector3<f64>>> = frames
            .iter()
            .map(|f| vec![Vector3::zeros(); f.normals.data.len()])
            .collect();
        let mut breakdowns = Vec::with_capacity(parts.len());
        for (link, (bd, g)) in self.links.iter().zip(parts) {
            breakdowns.push(bd);
            for (acc, v) in depth_grads[link.target].iter_mut().zip(&g.d_target_depth.data) {
                *acc += v / n;
            }
            for (acc, v) in depth_grads[link.source].iter_mut().zip(&g.d_source_depth.data) {
                *acc += v / n;
            }
            for (acc, v) in normal_grads[link.target].iter_mut().zip(&g.d_target_normals) {
                *acc += v / n;
            }
            for (acc, v) in normal_grads[link.source].iter_mut().zip(&g.d_source_normals) {
                *acc += v / n;
            }
        }
        Ok(Evaluated {
            breakdown: average(&breakdowns),
            depth_grads,
            normal_grads,
        })
    }
}

fn metrics_of(frames: &[Frame], gt: Option<&[GroundTruth]>) -> Result<Option<Vec<DepthMetrics>>> {
    gt.map(|gt| {
        frames
            .iter()
            .zip(gt)
            .map(|(f, g)| compute_metrics(&f.depth, &g.depth, &g.valid, false))
            .collect()
    })
    .transpose()
}

/// Minimises the mean objective over `links`, updating the frames in place.
pub fn refine_links(
    frames: &mut [Frame],
    links: &[PairLink],
    k: Intrinsics,
    w: &LossWeights,
    cfg: &RefineConfig,
    gt: Option<&[GroundTruth]>,
) -> Result<RefineReport> {
    cfg.validate()?;
    w.validate()?;
    if links.is_empty() {
        return Err(Error::InvalidInput("no frame pairs to refine".into()));
    }
    if let Some(gt) = gt {
        if gt.len() != frames.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ground-truth fields for {} frames",
                gt.len(),
                frames.len()
            )));
        }
    }
    for link in links {
        if link.target >= frames.len() || link.source >= frames.len() {
            return Err(Error::InvalidInput("pair refers to a missing frame".into()));
        }
    }
    if cfg.optimize_normals {
        for f in frames.iter_mut() {
            f.normals.orient_towards_camera(&k);
        }
    }
    let objective = Objective { links, k, w };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = RefineReport {
        initial_metrics: metrics_of(frames, gt)?,
        ..RefineReport::default()
    };
    // Block levels only shape the depth direction.
    let levels = if cfg.optimize_depth { cfg.multiscale_levels } else { 0 };
    let cycle = levels + 1;
    let mut steps = vec![cfg.learning_rate; cycle];
    let max_step = cfg.learning_rate * cfg.max_step_factor;
    let mut initial_total = None;
    let mut failures = 0;
    report.stop_reason = "max_iters".into();

    for iteration in 0..cfg.max_iters {
        let started = Instant::now();
        // Coarsest block level first, then finer ones down to the raw gradient.
        let level = levels - iteration % cycle;
        let channel = cfg
            .fixed_feature_channel
            .unwrap_or_else(|| rng.random_range(0..FEATURE_CHANNELS));
        let ev = objective.gradient(frames, channel)?;
        let e0 = ev.breakdown.total;
        let e_init = *initial_total.get_or_insert(e0);
        if e0 > 10.0 * e_init {
            report.stop_reason = "diverged".into();
            return Err(Error::Divergence {
                iteration,
                report: Box::new(report),
            });
        }

        // Descent directions: log-depth gradient and tangent normal gradient.
        let mut log_grads: Vec<Vec<f64>> = Vec::new();
        let mut depth_dirs: Vec<Vec<f64>> = Vec::new();
        if cfg.optimize_depth {
            for (f, g) in frames.iter().zip(&ev.depth_grads) {
                let g: Vec<f64> = g.iter().zip(&f.depth.data).map(|(g, d)| g * d).collect();
                depth_dirs.push(block_average(&g, f.depth.height, f.depth.width, level));
                log_grads.push(g);
            }
        }
        let mut normal_dirs: Vec<Vec<Vector3<f64>>> = Vec::new();
        if cfg.optimize_normals {
            normal_dirs = ev.normal_grads.clone();
            for (f, g) in frames.iter().zip(normal_dirs.iter_mut()) {
                project_to_tangent(&f.normals, g);
            }
        }
        let depth_scale = normalise_depth(&mut depth_dirs, cfg.scale_quantile);
        let normal_scale = normalise_normals(&mut normal_dirs, cfg.scale_quantile);
        // Directional derivative of the objective along the normalised direction.
        let mut slope = 0.0;
        if depth_scale > 0.0 {
            slope -= log_grads.iter().flatten().zip(depth_dirs.iter().flatten()).map(|(g, d)| g * d).sum::<f64>();
        }
        if normal_scale > 0.0 {
            slope -= ev
                .normal_grads
                .iter()
                .flatten()
                .zip(normal_dirs.iter().flatten())
                .map(|(g, d)| g.dot(d))
                .sum::<f64>();
        }

        let mut record = IterationRecord {
            iteration,
            feature_channel: channel,
            loss: ev.breakdown.clone(),
            accepted_total: e0,
            step: 0.0,
            backtracks: 0,
            seconds: 0.0,
        };
        if slope.abs() <= 1e-300 {
            record.seconds = started.elapsed().as_secs_f64();
            report.iterations.push(record);
            report.stop_reason = "stationary".into();
            break;
        }

        let mut accepted = None;
        let mut s = steps[level];
        for bt in 0..=cfg.max_backtracks {
            let trial = trial_frames(frames, &depth_dirs, &normal_dirs, s, &k)?;
            let e = objective.value(&trial, channel)?;
            if e < e0 && e <= e0 + 1e-4 * s * slope {
                accepted = Some((trial, e, bt));
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some((trial, e, bt)) => {
                frames.clone_from_slice(&trial);
                record.accepted_total = e;
                record.step = s;
                record.backtracks = bt;
                steps[level] = (s * cfg.step_growth).min(max_step);
                failures = 0;
            }
            None => {
                record.backtracks = cfg.max_backtracks + 1;
                steps[level] = cfg.learning_rate;
                failures += 1;
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        report.iterations.push(record);
        if cfg.fixed_feature_channel.is_some() {
            if failures >= cycle {
                report.stop_reason = "line_search_exhausted".into();
                break;
            }
            let n = report.iterations.len();
            if n >= cycle {
                let before = report.iterations[n - cycle].loss.total;
                let after = report.iterations[n - 1].accepted_total;
                if before - after <= cfg.convergence_tol * before.abs() {
                    report.stop_reason = "converged".into();
                    break;
                }
            }
        }
    }

    report.final_metrics = metrics_of(frames, gt)?;
    report.initial_mean = report.initial_metrics.as_deref().map(mean_metrics);
    report.final_mean = report.final_metrics.as_deref().map(mean_metrics);
    Ok(report)
}

/// The `q`-quantile of `values` (0 for an empty slice).
fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = ((values.len() - 1) as f64 * q).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

/// Divides by the `q`-quantile magnitude and clips to `[-1, 1]`, so a unit
/// step moves no pixel by more than one log-depth unit. Returns the scale.
fn normalise_depth(dirs: &mut [Vec<f64>], q: f64) -> f64 {
    let scale = quantile(dirs.iter().flatten().map(|d| d.abs()).collect(), q);
    if scale > 0.0 {
        dirs.iter_mut().flatten().for_each(|d| *d = (*d / scale).clamp(-1.0, 1.0));
    }
    scale
}

fn normalise_normals(dirs: &mut [Vec<Vector3<f64>>], q: f64) -> f64 {
    let scale = quantile(dirs.iter().flatten().map(|d| d.norm()).collect(), q);
    if scale > 0.0 {
        for d in dirs.iter_mut().flatten() {
            *d /= scale;
            let n = d.norm();
            if n > 1.0 {
                *d /= n;
            }
        }
    }
    scale
}

fn trial_frames(
    frames: &[Frame],
    depth_dirs: &[Vec<f64>],
    normal_dirs: &[Vec<Vector3<f64>>],
    s: f64,
    k: &Intrinsics,
) -> Result<Vec<Frame>> {
    let mut out = frames.to_vec();
    for (f, g) in out.iter_mut().zip(depth_dirs) {
        for (d, gi) in f.depth.data.iter_mut().zip(g) {
            *d *= (-s * gi).exp();
        }
        if f.depth.data.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::NonFinite { term: "depth update" });
        }
    }
    for (f, g) in out.iter_mut().zip(normal_dirs) {
        for (n, gi) in f.normals.data.iter_mut().zip(g) {
            *n = (*n - gi * s).normalize();
        }
        f.normals.orient_towards_camera(k);
    }
    Ok(out)
}

/// `B_l g`: every value replaced by the mean of its `2^l x 2^l` block.
/// `B_l` is an orthogonal projection, so `B_l g` is a descent direction
/// whenever it is nonzero.
fn block_average(g: &[f64], h: usize, w: usize, level: usize) -> Vec<f64> {
    if level == 0 {
        return g.to_vec();
    }
    let b = 1usize << level.min(usize::BITS as usize - 1);
    let (bh, bw) = (h.div_ceil(b), w.div_ceil(b));
    let mut sums = vec![0.0; bh * bw];
    let mut counts = vec![0.0; bh * bw];
    for i in 0..h {
        for j in 0..w {
            let k = (i / b) * bw + j / b;
            sums[k] += g[i * w + j];
            counts[k] += 1.0;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = (i / b) * bw + j / b;
            out[i * w + j] = sums[k] / counts[k];
        }
    }
    out
}

/// Refines both depths of a single directed pair.
pub fn refine_pair(
    target: &Frame,
    source: &Frame,
    pose_t_to_s: PoseSE3,
    k: Intrinsics,
    w: &LossWeights,
    cfg: &RefineConfig,
    gt: Option<&[GroundTruth; 2]>,
) -> Result<(Frame, Frame, RefineReport)> {
    let mut frames = vec![target.clone(), source.clone()];
    let links = [PairLink {
        target: 0,
        source: 1,
        pose_t_to_s,
    }];
    let report = refine_links(&mut frames, &links, k, w, cfg, gt.map(|g| g.as_slice()))?;
    let source = frames.pop().expect("two frames");
    let target = frames.pop().expect("two frames");
    Ok((target, source, report))
}

/// Adjacent pairs `(t, t+1)` and `(t+1, t)` for camera-to-world poses.
pub fn adjacent_links(poses_world: &[PoseSE3]) -> Vec<PairLink> {
    let mut links = Vec::new();
    for t in 0..poses_world.len().saturating_sub(1) {
        links.push(PairLink {
            target: t,
            source: t + 1,
            pose_t_to_s: relative_pose(&poses_world[t], &poses_world[t + 1]),
        });
        links.push(PairLink {
            target: t + 1,
            source: t,
            pose_t_to_s: relative_pose(&poses_world[t + 1], &poses_world[t]),
        });
    }
    links
}

/// Joint refinement of every frame of a sequence over its adjacent pairs.
pub fn refine_sequence(
    frames: Vec<Frame>,
    poses_world: &[PoseSE3],
    k: Intrinsics,
    w: &LossWeights,
    cfg: &RefineConfig,
    gt: Option<&[GroundTruth]>,
) -> Result<(Vec<Frame>, RefineReport)> {
    if frames.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "sequence refinement needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if poses_world.len() != frames.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} poses for {} frames",
            poses_world.len(),
            frames.len()
        )));
    }
    let mut frames = frames;
    let links = adjacent_links(poses_world);
    let report = refine_links(&mut frames, &links, k, w, cfg, gt)?;
    Ok((frames, report))
}
