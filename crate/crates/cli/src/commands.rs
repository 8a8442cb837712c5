use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use mpi_core::io::{self, load_mpi, load_scene, save_mpi, save_scene};
use mpi_core::metrics::MAX_CROP_FRACTION;
use mpi_core::render::render_view_with;
use mpi_core::synthetic::{synthetic_scene, SyntheticOptions};
use mpi_core::{
    compute_scale, disparity_map, evaluate_pair, fit::fit_mpi_with, materialize, Camera, EvalConfig,
    FitConfig, Frame, Mpi, Parallelism, SparsePointSet,
};

#[derive(Debug, Parser)]
#[command(name = "mpi", version, about = "Multiplane image fitting, rendering and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an MPI to a posed scene and write it as an archive.
    Fit(FitArgs),
    /// Render one view of an MPI.
    Render(RenderArgs),
    /// Render one view per pose line of a path file.
    RenderPath(RenderPathArgs),
    /// Write the MPI's disparity map.
    Disparity(DisparityArgs),
    /// Score an MPI against every non-source frame of a scene.
    Eval(EvalArgs),
    /// Write a viewer bundle (archive plus 8-bit previews).
    Export(ExportArgs),
    /// Generate a synthetic scene from a random textured MPI.
    Synth(SynthArgs),
}

/// Invalid value for a command-line flag.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct FlagError(String);

fn flag_error(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(FlagError(message.into()))
}

#[derive(Debug, Args)]
struct ParallelFlag {
    /// Use all cores (results are identical to serial runs).
    #[arg(long)]
    parallel: bool,
}

impl ParallelFlag {
    fn mode(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Serial
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    source_index: usize,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with fit settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    planes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    /// Fix sigma = 1 instead of aligning to the source points.
    #[arg(long)]
    no_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Write an archive under OUT/snapshots every N steps.
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[command(flatten)]
    parallel: ParallelFlag,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    mpi: PathBuf,
    /// Row-major 3x4 world-to-camera matrix, 12 numbers.
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    /// fx fy cx cy in pixels; defaults to the reference intrinsics.
    #[arg(long, allow_hyphen_values = true)]
    intrinsics: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    sigma: f64,
    #[command(flatten)]
    parallel: ParallelFlag,
}

#[derive(Debug, Args)]
struct RenderPathArgs {
    #[arg(long)]
    mpi: PathBuf,
    /// Text file, one pose per line: 12 pose numbers, optionally followed by
    /// 4 intrinsics. Blank lines and lines starting with '#' are skipped.
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct DisparityArgs {
    #[arg(long)]
    mpi: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Min-max normalize to [0, 1] for display.
    #[arg(long)]
    normalize: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    mpi: PathBuf,
    #[arg(long)]
    source_index: usize,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    crop: f64,
    #[arg(long, default_value_t = 0.6, allow_hyphen_values = true)]
    disocc_threshold: f64,
    /// Use this scale instead of aligning to the source frame's points.
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<f64>,
    #[command(flatten)]
    parallel: ParallelFlag,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    mpi: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<f64>,
    #[arg(long)]
    world_scale: Option<f64>,
    #[arg(long)]
    depth_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Render(a) => render(a),
        Command::RenderPath(a) => render_path(a),
        Command::Disparity(a) => disparity(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
        Command::Synth(a) => synth(a),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| {
        anyhow::Error::new(mpi_core::Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    })
}

fn parse_numbers<const N: usize>(text: &str, flag: &str) -> Result<[f64; N]> {
    let values: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| flag_error(format!("{flag}: {e}")))?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| flag_error(format!("{flag}: expected {N} numbers, got {}", v.len())))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(flag_error(format!("--sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let mut config: FitConfig = match &a.config {
        Some(path) => read_toml(path)?,
        None => FitConfig::default(),
    };
    if let Some(v) = a.planes {
        config.planes = v;
    }
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.near {
        config.d_near = v;
    }
    if let Some(v) = a.far {
        config.d_far = v;
    }
    if a.no_scale {
        config.use_scale = false;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.snapshot_every {
        config.snapshot_every = v;
    }
    let frames = load_scene(&a.scene)?;
    let source = frames
        .get(a.source_index)
        .ok_or_else(|| flag_error(format!("--source-index {} out of range ({} frames)", a.source_index, frames.len())))?;
    let source_image = source.image.clone();
    let snapshots = a.out.join("snapshots");
    let (params, report) = fit_mpi_with(&frames, a.source_index, &config, a.parallel.mode(), |step, params| {
        let mpi = materialize(params, &source_image)?;
        save_mpi(&mpi, &snapshots.join(format!("step_{step:06}")))
    })?;
    let mpi = materialize(&params, &source_image)?;
    save_mpi(&mpi, &a.out)?;
    let record = serde_json::json!({
        "scene": a.scene,
        "source_index": a.source_index,
        "config": config,
        "report": report,
    });
    let report_path = a.out.join("fit_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&record)? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    let last = report.history.last().expect("at least one step");
    println!(
        "fit steps={} loss={:.6} pixel={:.6} smooth={:.6} depth={:.6} sigma={:.6} wall_time_secs={:.2}",
        report.steps, last.total, last.pixel, last.smooth, last.depth, report.final_sigma, report.wall_time_secs
    );
    Ok(())
}

fn camera_for(mpi: &Mpi, pose: &[f64; 12], intrinsics: Option<[f64; 4]>) -> Result<Camera> {
    let intrinsics = intrinsics.unwrap_or_else(|| mpi.reference().intrinsics());
    Ok(Camera::from_flat(&intrinsics, pose)?)
}

fn render(a: RenderArgs) -> Result<()> {
    check_sigma(a.sigma)?;
    let pose = parse_numbers::<12>(&a.pose, "--pose")?;
    let intrinsics = a.intrinsics.as_deref().map(|s| parse_numbers::<4>(s, "--intrinsics")).transpose()?;
    let mpi = load_mpi(&a.mpi)?;
    let camera = camera_for(&mpi, &pose, intrinsics)?;
    let image = render_view_with(&mpi, &camera, a.sigma, a.parallel.mode())?;
    io::write_rgb16(&a.out, &image)?;
    Ok(())
}

fn render_path(a: RenderPathArgs) -> Result<()> {
    check_sigma(a.sigma)?;
    let text = fs::read_to_string(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    let mpi = load_mpi(&a.mpi)?;
    let mut cameras = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        let camera = match values.len() {
            12 => camera_for(&mpi, &parse_numbers::<12>(line, "pose")?, None),
            16 => camera_for(
                &mpi,
                &parse_numbers::<12>(&values[..12].join(" "), "pose")?,
                Some(parse_numbers::<4>(&values[12..].join(" "), "intrinsics")?),
            ),
            n => Err(anyhow::Error::new(mpi_core::Error::Parse {
                path: a.path.clone(),
                message: format!("line {}: expected 12 or 16 numbers, got {n}", line_no + 1),
            })),
        }
        .with_context(|| format!("{} line {}", a.path.display(), line_no + 1))?;
        cameras.push(camera);
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    cameras
        .par_iter()
        .enumerate()
        .try_for_each(|(i, camera)| -> Result<()> {
            let image = render_view_with(&mpi, camera, a.sigma, Parallelism::Serial)?;
            io::write_rgb16(&a.out_dir.join(format!("frame_{i:04}.png")), &image)?;
            Ok(())
        })?;
    println!("rendered {} frame(s) to {}", cameras.len(), a.out_dir.display());
    Ok(())
}

fn disparity(a: DisparityArgs) -> Result<()> {
    let mpi = load_mpi(&a.mpi)?;
    let mut map = disparity_map(&mpi);
    if a.normalize {
        let (lo, hi) = map.min_max();
        let range = hi - lo;
        map = map.map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 });
    } else if mpi.planes().near() < 1.0 {
        log::warn!("disparities above 1 are clipped; pass --normalize to rescale");
    }
    io::write_gray16(&a.out, &map)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(0.0..=MAX_CROP_FRACTION).contains(&a.crop) {
        return Err(flag_error(format!("--crop must be in [0, {MAX_CROP_FRACTION}], got {}", a.crop)));
    }
    if !(0.0..=1.0).contains(&a.disocc_threshold) {
        return Err(flag_error(format!(
            "--disocc-threshold must be in [0, 1], got {}",
            a.disocc_threshold
        )));
    }
    let frames = load_scene(&a.scene)?;
    let mpi = load_mpi(&a.mpi)?;
    let source = frames
        .get(a.source_index)
        .ok_or_else(|| flag_error(format!("--source-index {} out of range ({} frames)", a.source_index, frames.len())))?;
    let sigma = match a.sigma {
        Some(s) => {
            check_sigma(s)?;
            s
        }
        None => scale_for(&mpi, &source.points)?,
    };
    let config = EvalConfig {
        crop_fraction: a.crop,
        disocc_threshold: a.disocc_threshold,
    };
    let reports = frames
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != a.source_index)
        .map(|(i, f)| Ok((i, eval_frame(&mpi, f, sigma, &config, a.parallel.mode())?)))
        .collect::<Result<Vec<_>>>()?;
    for (i, report) in reports {
        println!("frame={i} sigma={sigma:.6} {report}");
    }
    Ok(())
}

fn scale_for(mpi: &Mpi, points: &SparsePointSet) -> Result<f64> {
    if points.is_empty() {
        log::warn!("source frame has no points; evaluating with sigma = 1");
        return Ok(1.0);
    }
    Ok(compute_scale(&disparity_map(mpi), points)?.value())
}

fn eval_frame(
    mpi: &Mpi,
    frame: &Frame,
    sigma: f64,
    config: &EvalConfig,
    _parallelism: Parallelism,
) -> Result<mpi_core::MetricReport> {
    Ok(evaluate_pair(mpi, &frame.camera, &frame.image, sigma, config)?)
}

fn export(a: ExportArgs) -> Result<()> {
    let mpi = load_mpi(&a.mpi)?;
    let manifest = io::export_bundle(&mpi, &a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut options: SyntheticOptions = match &a.config {
        Some(path) => read_toml(path)?,
        None => SyntheticOptions::default(),
    };
    if let Some(v) = a.baseline {
        options.baseline = v;
    }
    if let Some(v) = a.world_scale {
        options.world_scale = v;
    }
    if let Some(v) = a.depth_noise {
        options.depth_noise = v;
    }
    if let Some(v) = a.seed {
        options.seed = v;
    }
    let scene = synthetic_scene(&options)?;
    let fit_scene = save_scene(&a.out, &scene.frames)?;
    let source = scene.frames[scene.source_index].clone();
    let held_out = save_scene(&a.out.join("heldout"), &[source, scene.held_out.clone()])?;
    save_mpi(&scene.ground_truth, &a.out.join("ground_truth"))?;
    let options_path = a.out.join("synth.toml");
    fs::write(&options_path, toml::to_string(&options)?)
        .with_context(|| format!("writing {}", options_path.display()))?;
    println!(
        "scene={} heldout={} source_index={}",
        fit_scene.display(),
        held_out.display(),
        scene.source_index
    );
    Ok(())
}
