use clap::{Args, ValueEnum};
use colde::features::coordinate_scale;
use colde::grad::{coordinates, fd_coordinates, grad_total_loss, Coordinate, Wrt};
use colde::io::Sequence;
use colde::objectives::{evaluate, FramePair};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::load_config;
use crate::{check_frame, emit, CliError, CliResult, PairArgs};

/// Target-depth coordinates whose projection lies this close (in pixels) to
/// a bilinear cell edge are skipped.
const BOUNDARY: f64 = 1e-3;
/// Gradient components below this are compared absolutely.
const FLOOR: f64 = 1e-7;
/// Smallest step tried after a mismatch.
const MIN_STEP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WrtArg {
    Depth,
    Normals,
    Pose,
    All,
}

impl From<WrtArg> for Wrt {
    fn from(w: WrtArg) -> Self {
        match w {
            WrtArg::Depth => Wrt::Depth,
            WrtArg::Normals => Wrt::Normals,
            WrtArg::Pose => Wrt::Pose,
            WrtArg::All => Wrt::All,
        }
    }
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Randomly sampled coordinates; pose coordinates are always included.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    /// Relative for depths, absolute for normals and pose.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = WrtArg::All)]
    wrt: WrtArg,
}

#[derive(Serialize)]
struct Entry {
    coordinate: Coordinate,
    analytic: f64,
    finite_difference: f64,
    relative_error: f64,
    /// Step of the quotient that was judged. Smaller than the requested step
    /// after a mismatch.
    step: f64,
}

#[derive(Serialize)]
struct Report {
    tolerance: f64,
    step: f64,
    skipped_near_cell_edge: usize,
    worst_relative_error: f64,
    worst_coordinate: Option<Coordinate>,
    passed: bool,
    entries: Vec<Entry>,
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(FLOOR)
}

fn grid_margin(x: f64) -> f64 {
    let f = x - x.floor();
    f.min(1.0 - f)
}

pub fn run(a: GradCheckArgs) -> CliResult<()> {
    let p = &a.pair;
    let cfg = load_config(p.weights.as_deref())?;
    let seq = Sequence::read(&p.input)?;
    check_frame(&seq, p.target)?;
    check_frame(&seq, p.source)?;
    let frames = seq.to_frames()?;
    let pose = colde::synth::relative_pose(&seq.frames[p.target].pose_world, &seq.frames[p.source].pose_world);
    let pair = FramePair::new(&frames[p.target], &frames[p.source], pose, seq.intrinsics, p.channel)?;
    let w = &cfg.weights;

    let (h, wd) = pair.target.shape();
    let feat = &pair.source.features;
    let scale = [coordinate_scale(wd, feat.width)?, coordinate_scale(h, feat.height)?];
    let ev = evaluate(&pair, w, None)?;
    let near_edge = |c: &Coordinate| match c {
        Coordinate::TargetDepth(px) => {
            let q = ev.projections[*px].coord;
            [q.x, q.y, q.x * scale[0], q.y * scale[1]].iter().any(|v| grid_margin(*v) < BOUNDARY)
        }
        _ => false,
    };

    let wrt = Wrt::from(a.wrt);
    let (pose_coords, pixel_coords): (Vec<Coordinate>, Vec<Coordinate>) =
        coordinates(h, wd, wrt).into_iter().partition(|c| matches!(c, Coordinate::Pose(_)));
    let candidates: Vec<Coordinate> = pixel_coords.iter().copied().filter(|c| !near_edge(c)).collect();
    let skipped = pixel_coords.len() - candidates.len();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut chosen: Vec<Coordinate> = candidates.choose_multiple(&mut rng, a.samples).copied().collect();
    chosen.extend(pose_coords);
    if chosen.is_empty() {
        return Err(CliError::new("empty_selection", "no coordinate to check"));
    }

    let analytic = grad_total_loss(&pair, w, wrt)?;
    let quotients = fd_coordinates(&pair, w, &chosen, a.step)?;
    let mut entries = Vec::with_capacity(chosen.len());
    for (c, f) in chosen.into_iter().zip(quotients) {
        let g = analytic.component(c);
        let (mut fd, mut h) = (f, a.step);
        // Projections crossing bilinear cell edges put kinks inside coarse
        // steps, so a mismatch is retried at finer steps.
        let mut k = 0;
        while rel_err(g, fd) >= a.tol && a.step * 10f64.powi(-(k + 1)) >= MIN_STEP {
            k += 1;
            h = a.step * 10f64.powi(-k);
            fd = fd_coordinates(&pair, w, &[c], h)?[0];
        }
        entries.push(Entry {
            coordinate: c,
            analytic: g,
            finite_difference: fd,
            relative_error: rel_err(g, fd),
            step: h,
        });
    }
    let worst = entries.iter().max_by(|x, y| x.relative_error.total_cmp(&y.relative_error));
    let worst_relative_error = worst.map_or(0.0, |e| e.relative_error);
    let report = Report {
        tolerance: a.tol,
        step: a.step,
        skipped_near_cell_edge: skipped,
        worst_relative_error,
        worst_coordinate: worst.map(|e| e.coordinate),
        passed: worst_relative_error < a.tol,
        entries,
    };
    emit(&format!("{}\n", serde_json::to_string_pretty(&report).expect("report serialises")))?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::new(
            "gradient_mismatch",
            format!("worst relative error {worst_relative_error:.3e} exceeds {:.1e}", a.tol),
        ))
    }
}
