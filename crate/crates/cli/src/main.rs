//! `colde`: synthesise, perturb, refine, evaluate and fuse depth sequences.

mod config;
mod gradcheck;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colde::fusion::{fuse_pointcloud, windowed_depth_average, FusionView, DEFAULT_WINDOW};
use colde::io::{list_bins, read_depth_dir, read_mask, Sequence, MANIFEST_NAME};
use colde::metrics::{compute_metrics, mean_metrics, DepthMetrics};
use colde::objectives::{total_loss, FramePair};
use colde::refine::{refine_sequence, GroundTruth};
use colde::synth::{perturb_depths, pullback_path, render_sequence, SceneConfig, DEFAULT_TILT_DEG};
use colde::{normals_from_depth, DepthField, Mask};

use crate::config::{load_config, ConfigFile};
use crate::gradcheck::GradCheckArgs;

#[derive(Parser, Debug)]
#[command(name = "colde", version, about = "Depth refinement by direct minimisation of self-supervised objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic colon sequence with ground truth.
    Synth(SynthArgs),
    /// Scale and/or add log-normal noise to a sequence's depths.
    Perturb(PerturbArgs),
    /// Print the loss breakdown of one frame pair as JSON.
    Loss(LossArgs),
    /// Compare analytic and finite-difference gradients on sampled coordinates.
    CheckGrad(GradCheckArgs),
    /// Refine depths (and optionally normals) of a sequence.
    Refine(RefineArgs),
    /// Depth metrics of predictions against ground truth.
    Eval(EvalArgs),
    /// Fuse a sequence into a PLY point cloud.
    Fuse(FuseArgs),
    /// Configuration files.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of frames on the default pull-back path.
    #[arg(long)]
    frames: Option<usize>,
    /// Scene configuration JSON; missing keys take their defaults.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Texture seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write PNG previews.
    #[arg(long)]
    png: bool,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Standard deviation of the log-normal factor.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub(crate) struct PairArgs {
    /// Sequence directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub target: usize,
    #[arg(long, default_value_t = 1)]
    pub source: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Configuration or loss-weight JSON.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LossArgs {
    #[command(flatten)]
    pair: PairArgs,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Configuration or loss-weight JSON.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use one feature channel throughout instead of a random one per iteration.
    #[arg(long)]
    channel: Option<usize>,
    /// Also optimise normals.
    #[arg(long)]
    normals: bool,
    /// Keep depths fixed.
    #[arg(long)]
    no_depth: bool,
    /// Ground-truth sequence; adds depth metrics to the report.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Sequence directory or directory of depth `.bin` files.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Directory of mask `.bin` files; defaults to the ground truth's masks.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    no_median_scale: bool,
    /// Write the per-frame CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the aggregate JSON here instead of stderr.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output PLY file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Fuse the depths as given, without windowed averaging.
    #[arg(long)]
    no_average: bool,
    /// Voxel size for thinning the cloud.
    #[arg(long)]
    voxel: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum ConfigCommand {
    /// Write the default configuration.
    Init {
        #[arg(long, default_value = "colde.json")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// A failure reported as one `error kind=... message=...` line.
#[derive(Debug)]
pub(crate) struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }
}

impl From<colde::Error> for CliError {
    fn from(e: colde::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        colde::Error::Io(e).into()
    }
}

pub(crate) type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = serde_json::to_string(&e.message).expect("string serialises");
            eprintln!("error kind={} message={message}", e.kind);
            ExitCode::FAILURE
        }
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
pub(crate) fn emit(text: &str) -> CliResult<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("COLDE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::new("invalid_input", format!("COLDE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new("invalid_input", e.to_string()))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Perturb(a) => perturb(a),
        Command::Loss(a) => loss(a),
        Command::CheckGrad(a) => gradcheck::run(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Fuse(a) => fuse(a),
        Command::Config(ConfigCommand::Init { out, force }) => config_init(&out, force),
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut scene = match &a.scene {
        Some(path) => serde_json::from_str::<SceneConfig>(&read_text(path)?)
            .map_err(|e| CliError::new("malformed_file", format!("{}: {e}", path.display())))?,
        None => SceneConfig::default(),
    };
    if let Some(n) = a.frames {
        scene.camera_path = pullback_path(n, 0.05, DEFAULT_TILT_DEG);
    }
    scene.width = a.width.unwrap_or(scene.width);
    scene.height = a.height.unwrap_or(scene.height);
    scene.seed = a.seed.unwrap_or(scene.seed);
    let rendered = render_sequence(&scene)?;
    let generator = serde_json::to_value(&scene).expect("scene serialises");
    Sequence::from_rendered(&rendered, Some(generator)).write(&a.out, a.png)?;
    log::info!("wrote {} frames to {}", rendered.frames.len(), a.out.display());
    Ok(())
}

fn perturb(a: PerturbArgs) -> CliResult<()> {
    let mut seq = Sequence::read(&a.input)?;
    let depths: Vec<DepthField> = seq.frames.iter().map(|f| f.depth.clone()).collect();
    let perturbed = perturb_depths(&depths, a.scale, a.noise, a.seed)?;
    for (f, d) in seq.frames.iter_mut().zip(perturbed) {
        f.normals = Some(normals_from_depth(&d, &seq.intrinsics)?);
        f.depth = d;
    }
    seq.write(&a.out, false)?;
    Ok(())
}

pub(crate) fn check_frame(seq: &Sequence, idx: usize) -> CliResult<()> {
    if idx >= seq.frames.len() {
        return Err(CliError::new(
            "invalid_input",
            format!("frame {idx} out of range for a {}-frame sequence", seq.frames.len()),
        ));
    }
    Ok(())
}

fn loss(a: LossArgs) -> CliResult<()> {
    let p = &a.pair;
    let cfg = load_config(p.weights.as_deref())?;
    let seq = Sequence::read(&p.input)?;
    check_frame(&seq, p.target)?;
    check_frame(&seq, p.source)?;
    let frames = seq.to_frames()?;
    let pose = colde::synth::relative_pose(&seq.frames[p.target].pose_world, &seq.frames[p.source].pose_world);
    let pair = FramePair::new(&frames[p.target], &frames[p.source], pose, seq.intrinsics, p.channel)?;
    let breakdown = total_loss(&pair, &cfg.weights)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&breakdown).expect("breakdown serialises")))?;
    Ok(())
}

/// Ground truth from a sequence directory; pixels without a stored mask are
/// valid where the depth is positive.
fn ground_truth(dir: &Path) -> CliResult<Vec<GroundTruth>> {
    let seq = Sequence::read(dir)?;
    Ok(seq
        .frames
        .into_iter()
        .map(|f| {
            let valid = f.valid.unwrap_or_else(|| positive(&f.depth));
            GroundTruth { depth: f.depth, valid }
        })
        .collect())
}

fn positive(d: &DepthField) -> Mask {
    Mask {
        height: d.height,
        width: d.width,
        data: d.data.iter().map(|v| v.is_finite() && *v > 0.0).collect(),
    }
}

fn refine(a: RefineArgs) -> CliResult<()> {
    let ConfigFile { weights, refine: mut cfg } = load_config(a.weights.as_deref())?;
    cfg.max_iters = a.iters.unwrap_or(cfg.max_iters);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.fixed_feature_channel = a.channel.or(cfg.fixed_feature_channel);
    cfg.optimize_normals |= a.normals;
    cfg.optimize_depth &= !a.no_depth;

    let mut seq = Sequence::read(&a.input)?;
    let gt = a.gt.as_deref().map(ground_truth).transpose()?;
    if let Some(gt) = &gt {
        if gt.len() != seq.frames.len() {
            return Err(CliError::new(
                "shape_mismatch",
                format!("{} ground-truth frames for {} input frames", gt.len(), seq.frames.len()),
            ));
        }
    }
    let frames = seq.to_frames()?;
    let outcome = refine_sequence(frames, &seq.poses(), seq.intrinsics, &weights, &cfg, gt.as_deref());
    fs::create_dir_all(&a.out)?;
    let report_path = a.out.join("report.json");
    let (refined, report) = match outcome {
        Ok(done) => done,
        Err(colde::Error::Divergence { iteration, report }) => {
            fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serialises"))?;
            return Err(colde::Error::Divergence { iteration, report }.into());
        }
        Err(e) => return Err(e.into()),
    };
    for (f, r) in seq.frames.iter_mut().zip(refined) {
        f.depth = r.depth;
        f.normals = Some(r.normals);
    }
    seq.write(&a.out, false)?;
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serialises"))?;
    if let (Some(first), Some(last)) = (report.initial_total(), report.final_total()) {
        log::info!(
            "{} iterations, stop reason {}, loss {first:.6} -> {last:.6}",
            report.iterations.len(),
            report.stop_reason
        );
    }
    Ok(())
}

/// Depths and, when stored, validity masks of a sequence or depth directory.
fn depth_source(path: &Path) -> CliResult<(Vec<DepthField>, Option<Vec<Mask>>)> {
    if path.join(MANIFEST_NAME).is_file() {
        let seq = Sequence::read(path)?;
        let masks: Option<Vec<Mask>> = seq.frames.iter().map(|f| f.valid.clone()).collect();
        return Ok((seq.frames.into_iter().map(|f| f.depth).collect(), masks));
    }
    Ok((read_depth_dir(path)?, None))
}

const CSV_HEADER: &str = "frame,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,scale";

fn csv_row(frame: usize, m: &DepthMetrics) -> String {
    format!(
        "{frame},{},{},{},{},{},{},{},{}",
        m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3, m.scale_applied
    )
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (pred, _) = depth_source(&a.pred)?;
    let (gt, gt_masks) = depth_source(&a.gt)?;
    if pred.len() != gt.len() {
        return Err(CliError::new(
            "shape_mismatch",
            format!("{} predicted frames against {} ground-truth frames", pred.len(), gt.len()),
        ));
    }
    if pred.is_empty() {
        return Err(CliError::new("empty_selection", "no depth frames to evaluate"));
    }
    let masks: Vec<Mask> = match (&a.valid, gt_masks) {
        (Some(dir), _) => {
            let masks = list_bins(dir)?.iter().map(|p| read_mask(p)).collect::<colde::Result<Vec<_>>>()?;
            if masks.len() != gt.len() {
                return Err(CliError::new(
                    "shape_mismatch",
                    format!("{} masks for {} frames", masks.len(), gt.len()),
                ));
            }
            masks
        }
        (None, Some(masks)) => masks,
        (None, None) => gt.iter().map(positive).collect(),
    };
    let per_frame = pred
        .iter()
        .zip(&gt)
        .zip(&masks)
        .map(|((p, g), m)| compute_metrics(p, g, &m.and(&positive(g)), !a.no_median_scale))
        .collect::<colde::Result<Vec<_>>>()?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for (i, m) in per_frame.iter().enumerate() {
        csv.push_str(&csv_row(i, m));
        csv.push('\n');
    }
    match &a.csv {
        Some(path) => fs::write(path, csv)?,
        None => emit(&csv)?,
    }
    let summary = serde_json::json!({
        "frames": per_frame.len(),
        "median_scaling": !a.no_median_scale,
        "mean": mean_metrics(&per_frame),
    });
    match &a.json {
        Some(path) => fs::write(path, serde_json::to_string_pretty(&summary).expect("summary serialises"))?,
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> CliResult<()> {
    let seq = Sequence::read(&a.input)?;
    let poses = seq.poses();
    let depths: Vec<DepthField> = seq.frames.iter().map(|f| f.depth.clone()).collect();
    let depths = if a.no_average {
        depths
    } else {
        windowed_depth_average(&depths, &poses, &seq.intrinsics, a.window)?
    };
    let views: Vec<FusionView> = seq
        .frames
        .iter()
        .zip(&depths)
        .map(|(f, d)| FusionView {
            depth: d,
            image: &f.image,
            valid: f.valid.as_ref(),
            pose_world: f.pose_world,
        })
        .collect();
    let cloud = fuse_pointcloud(&views, &seq.intrinsics, a.voxel)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(&a.out)?);
    cloud.write_ply(&mut out)?;
    out.flush()?;
    log::info!("wrote {} points to {}", cloud.len(), a.out.display());
    Ok(())
}

fn config_init(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() && !force {
        return Err(CliError::new(
            "invalid_input",
            format!("{} exists; pass --force to overwrite", out.display()),
        ));
    }
    let text = serde_json::to_string_pretty(&ConfigFile::default()).expect("config serialises");
    fs::write(out, text + "\n")?;
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => colde::Error::MissingFile(path.to_path_buf()).into(),
        _ => e.into(),
    })
}
