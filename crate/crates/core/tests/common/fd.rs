//! Shared pieces of the finite-difference gradient check.

use colde::grad::{fd_gradient, grad_total_loss, GradientBundle, Wrt};
use colde::objectives::LossWeights;
use colde::project_pixel;

use super::{grid_margin, Instance};

pub const BOUNDARY: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

/// Target pixels whose projection sits within `BOUNDARY` of an image or
/// feature-grid cell edge; their depth derivative is not smooth there.
pub fn near_boundary(inst: &Instance) -> Vec<bool> {
    let (h, w) = (inst.k.height, inst.k.width);
    (0..h * w)
        .map(|p| {
            let proj = project_pixel(p / w, p % w, &inst.target.depth, &inst.pose, &inst.k).unwrap();
            let q = proj.coord;
            !proj.in_front
                || [q.x, q.y, 0.5 * q.x, 0.5 * q.y].iter().any(|&c| grid_margin(c) < BOUNDARY)
        })
        .collect()
}

/// Flattened gradient coordinates with labels; target depth entries near a
/// cell boundary are left out.
pub fn coordinates(g: &GradientBundle, skip: &[bool]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (p, &s) in skip.iter().enumerate() {
        if !s {
            out.push((format!("target depth {p}"), g.d_target_depth.data[p]));
        }
        out.push((format!("source depth {p}"), g.d_source_depth.data[p]));
        for c in 0..3 {
            out.push((format!("target normal {p}.{c}"), g.d_target_normals[p][c]));
            out.push((format!("source normal {p}.{c}"), g.d_source_normals[p][c]));
        }
    }
    for c in 0..6 {
        out.push((format!("pose {c}"), g.d_pose[c]));
    }
    out
}

pub struct FdReport {
    pub worst: f64,
    pub worst_at: String,
    pub kinks: usize,
    pub coordinates: usize,
}

/// Analytic against central-difference gradients on `Instance::random(seed, 16, 16)`.
pub fn check_instance(seed: u64) -> FdReport {
    let w = LossWeights::default();
    // Central differences of an O(0.1) loss at step 1e-5 carry about 1e-12
    // of rounding; smaller components are compared absolutely.
    let floor = 1e-7;
    let inst = Instance::random(seed, 16, 16);
    let pair = inst.pair(seed as usize * 7 % 64);
    let skip = near_boundary(&inst);
    let a = coordinates(&grad_total_loss(&pair, &w, Wrt::All).unwrap(), &skip);
    let f = coordinates(&fd_gradient(&pair, &w, Wrt::All, 1e-5).unwrap(), &skip);
    let f_fine = coordinates(&fd_gradient(&pair, &w, Wrt::All, 1e-6).unwrap(), &skip);
    let mut report = FdReport {
        worst: 0.0,
        worst_at: String::new(),
        kinks: 0,
        coordinates: a.len(),
    };
    for (((name, a), (_, f)), (_, f_fine)) in a.iter().zip(&f).zip(&f_fine) {
        let mut e = rel_err(*a, *f, floor);
        // A step that straddles an L1 kink makes the two difference
        // quotients disagree; judge such coordinates at the finer step.
        if e >= REL_TOL && rel_err(*f, *f_fine, floor) >= REL_TOL {
            report.kinks += 1;
            e = rel_err(*a, *f_fine, floor);
        }
        if e > report.worst {
            report.worst = e;
            report.worst_at = name.clone();
        }
    }
    report
}
