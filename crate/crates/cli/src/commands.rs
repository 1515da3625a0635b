//! Argument parsing and the command implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use handles_core::flow::{build_flow, warp, FlowField};
use handles_core::geometry::lift;
use handles_core::io::{read_rgb_png, write_pfm_map, write_rgb_png};
use handles_core::metrics::evaluate_benchmark;
use handles_core::scenes::BenchmarkConfig;
use handles_core::FeatureMap;
use serde_json::{json, Value};

use crate::config::{EditConfig, Needs};
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    camera, create_dir, depth_options, load_inputs, read_inversion, run_depth_edit, run_edit, write_depth_edit,
    write_edit, write_inversion, write_json, write_text, Engine,
};
use crate::bench;

#[derive(Debug, Parser)]
#[command(name = "handle-engine", version, about = "Depth-aware object editing with guided diffusion sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Back-project a depth map to camera-space points (points.pfm).
    Lift(ConfigArgs),
    /// Build the flow field of an edit.
    Flow(ConfigArgs),
    /// Warp an image with a stored flow field.
    Warp(WarpArgs),
    /// Edit the depth map: d_prime.pfm plus masks and flow.
    EditDepth(ConfigArgs),
    /// Invert an image to x_T and record activations.
    Invert {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the reconstruction and report its error.
        #[arg(long)]
        reconstruct: bool,
    },
    /// Run the full edit pipeline.
    Edit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write a decoded snapshot of every sampling step.
        #[arg(long)]
        dump_trajectory: bool,
    },
    /// Synthetic benchmark.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Score a benchmark run against its ground truth.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report directory, defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Sample edits and render inputs and ground truth.
    Generate {
        #[arg(short = 'n', long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit every sample and its inverse.
    Run {
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Flow base path, as written by `flow` (`<base>.u.pfm`, ...).
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// `--config` plus overrides of individual config fields.
#[derive(Debug, Default, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub background_depth: Option<PathBuf>,
    /// Directory with a previous `invert` output.
    #[arg(long)]
    pub inversion: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fov: Option<f64>,
    /// `x,y,z`
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub axis: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub angle: Option<f64>,
    /// `x,y,z`
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub translation: Option<Vec<f64>>,
    /// `centroid` or `x,y,z`.
    #[arg(long)]
    pub pivot: Option<String>,
    /// z | euclidean
    #[arg(long)]
    pub depth_convention: Option<String>,
    /// nudge | epsilon
    #[arg(long)]
    pub guidance_mode: Option<String>,
    /// per-channel | vector-norm
    #[arg(long)]
    pub bg_energy: Option<String>,
    /// adaptive | nearest
    #[arg(long)]
    pub footprint: Option<String>,
    #[arg(long)]
    pub erosion: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cutoff: Option<usize>,
    #[arg(long)]
    pub gd_steps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub w_obj: Option<f64>,
    #[arg(long)]
    pub w_bg: Option<f64>,
    /// Side of the denoiser's sample grid.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

fn parse_pivot(s: &str) -> CliResult<Value> {
    if s == "centroid" {
        return Ok(json!("centroid"));
    }
    let parts: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match parts {
        Ok(p) if p.len() == 3 => Ok(json!(p)),
        _ => Err(CliError::Config(format!("invalid pivot {s:?}, expected centroid or x,y,z"))),
    }
}

fn triple(name: &str, v: &Option<Vec<f64>>) -> CliResult<Option<Value>> {
    match v {
        None => Ok(None),
        Some(p) if p.len() == 3 => Ok(Some(json!(p))),
        Some(p) => Err(CliError::Config(format!("--{name} needs 3 comma-separated values, got {}", p.len()))),
    }
}

impl ConfigArgs {
    fn overrides(&self) -> CliResult<Vec<(String, Value)>> {
        let mut o: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
        for (k, v) in [
            ("/paths/depth", path(&self.depth)),
            ("/paths/image", path(&self.image)),
            ("/paths/mask", path(&self.mask)),
            ("/paths/background_depth", path(&self.background_depth)),
            ("/paths/inversion", path(&self.inversion)),
            ("/paths/output", path(&self.out)),
            ("/seed", self.seed.map(|v| json!(v))),
            ("/camera/fov_deg", self.fov.map(|v| json!(v))),
            ("/transform/axis", triple("axis", &self.axis)?),
            ("/transform/angle_deg", self.angle.map(|v| json!(v))),
            ("/transform/translation", triple("translation", &self.translation)?),
            ("/transform/pivot", self.pivot.as_deref().map(parse_pivot).transpose()?),
            ("/flags/depth_convention", self.depth_convention.as_ref().map(|v| json!(v))),
            ("/flags/guidance_mode", self.guidance_mode.as_ref().map(|v| json!(v))),
            ("/flags/bg_energy", self.bg_energy.as_ref().map(|v| json!(v))),
            ("/flags/splat_footprint", self.footprint.as_ref().map(|v| json!(v))),
            ("/flags/validity_erosion", self.erosion.map(|v| json!(v))),
            ("/flags/delta", self.delta.map(|v| json!(v))),
            ("/schedule/total_steps", self.steps.map(|v| json!(v))),
            ("/schedule/cutoff_step", self.cutoff.map(|v| json!(v))),
            ("/schedule/grad_descent_steps", self.gd_steps.map(|v| json!(v))),
            ("/schedule/lambda", self.lambda.map(|v| json!(v))),
            ("/schedule/mu", self.mu.map(|v| json!(v))),
            ("/schedule/w_obj", self.w_obj.map(|v| json!(v))),
            ("/schedule/w_bg", self.w_bg.map(|v| json!(v))),
            ("/denoiser/resolution", self.resolution.map(|v| json!(v))),
            ("/denoiser/gamma", self.gamma.map(|v| json!(v))),
        ] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        Ok(o)
    }

    pub fn resolve(&self) -> CliResult<EditConfig> {
        EditConfig::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_output(cfg: &EditConfig) -> CliResult<PathBuf> {
    let dir = cfg.output_dir()?.to_path_buf();
    create_dir(&dir)?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    Ok(dir)
}

const DEPTH_MASK: Needs = Needs { depth: true, image: false, mask: true };
const ALL: Needs = Needs { depth: true, image: true, mask: true };

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Lift(args) => cmd_lift(&args.resolve()?),
        Command::Flow(args) => cmd_flow(&args.resolve()?),
        Command::Warp(args) => cmd_warp(&args),
        Command::EditDepth(args) => cmd_edit_depth(&args.resolve()?),
        Command::Invert { config, reconstruct } => cmd_invert(&config.resolve()?, reconstruct),
        Command::Edit { config, dump_trajectory } => cmd_edit(&config.resolve()?, dump_trajectory),
        Command::Bench(BenchCommand::Generate {
            count,
            seed,
            delta,
            resolution,
            out,
        }) => {
            let mut cfg = BenchmarkConfig {
                delta,
                ..Default::default()
            };
            cfg.rig.width = resolution;
            cfg.rig.height = resolution;
            let samples = bench::generate(&out, count, seed, &cfg)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Bench(BenchCommand::Run { gt, config }) => {
            let cfg = config.resolve()?;
            cfg.validate(Needs { depth: false, image: false, mask: false })?;
            let out = cfg.output_dir()?.to_path_buf();
            let summary = bench::run(&gt, &out, &cfg)?;
            println!(
                "{} samples completed, {} failed",
                summary.completed.len(),
                summary.failures.len()
            );
            for f in &summary.failures {
                println!("  {}: {}", f.id, f.error);
            }
            Ok(())
        }
        Command::Eval { run, gt, out } => cmd_eval(&run, &gt, out.as_deref()),
    }
}

pub fn cmd_lift(cfg: &EditConfig) -> CliResult<()> {
    let inputs = load_inputs(cfg, Needs { depth: true, image: false, mask: false })?;
    let depth = inputs.depth.expect("loaded");
    let dir = prepare_output(cfg)?;
    let cam = camera(cfg, depth.width(), depth.height())?;
    let z = cfg.flags.depth_convention.to_z(&depth, &cam)?;
    let grid = lift(&z, &cam)?;
    let (w, h) = (grid.width(), grid.height());
    let points = FeatureMap::from_fn(3, w, h, |c, x, y| grid.get(x, y)[c] as f32)?;
    write_pfm_map(&points, dir.join("points.pfm"))?;
    Ok(())
}

pub fn cmd_flow(cfg: &EditConfig) -> CliResult<()> {
    let inputs = load_inputs(cfg, DEPTH_MASK)?;
    let (depth, mask) = (inputs.depth.expect("loaded"), inputs.mask.expect("loaded"));
    let dir = prepare_output(cfg)?;
    let cam = camera(cfg, depth.width(), depth.height())?;
    let z = cfg.flags.depth_convention.to_z(&depth, &cam)?;
    let transform = cfg.transform.resolve(lift(&z, &cam)?.centroid(&mask))?;
    let built = build_flow(&z, &cam, &transform, &mask, depth_options(cfg).flow)?;
    built.flow.write(dir.join("flow"))?;
    Ok(())
}

pub fn cmd_warp(args: &WarpArgs) -> CliResult<()> {
    if !args.image.is_file() {
        return Err(CliError::Config(format!("missing image file: {}", args.image.display())));
    }
    let image = read_rgb_png(&args.image)?;
    let flow = FlowField::read(&args.flow)?;
    write_rgb_png(&warp(&image, &flow)?, &args.out)?;
    Ok(())
}

pub fn cmd_edit_depth(cfg: &EditConfig) -> CliResult<()> {
    let inputs = load_inputs(cfg, DEPTH_MASK)?;
    let (depth, mask) = (inputs.depth.expect("loaded"), inputs.mask.expect("loaded"));
    let dir = prepare_output(cfg)?;
    let dres = run_depth_edit(cfg, &depth, &mask, inputs.background.as_ref())?;
    write_depth_edit(&dres, &dir)
}

pub fn cmd_invert(cfg: &EditConfig, reconstruct: bool) -> CliResult<()> {
    let inputs = load_inputs(cfg, Needs { depth: true, image: true, mask: false })?;
    let (image, depth) = (inputs.image.expect("loaded"), inputs.depth.expect("loaded"));
    let dir = prepare_output(cfg)?;
    let engine = Engine::new(cfg, &image)?;
    let inv = engine.invert(&image, &depth)?;
    write_inversion(&inv, &dir)?;
    if reconstruct {
        let x0 = engine.codec.encode(&image)?;
        let (mut max_abs, mut sum) = (0.0f64, 0.0f64);
        for (&a, &b) in inv.reconstruction.data().iter().zip(x0.data()) {
            let d = (a as f64 - b as f64).abs();
            max_abs = max_abs.max(d);
            sum += d;
        }
        let mean_abs = sum / x0.data().len() as f64;
        write_rgb_png(&engine.codec.decode(&inv.reconstruction, &image)?, dir.join("reconstruction.png"))?;
        write_json(
            &dir.join("reconstruction.json"),
            &json!({ "max_abs_error": max_abs, "mean_abs_error": mean_abs }),
        )?;
        println!("reconstruction error: max-abs {max_abs:.3e}, mean-abs {mean_abs:.3e}");
    }
    Ok(())
}

pub fn cmd_edit(cfg: &EditConfig, dump_trajectory: bool) -> CliResult<()> {
    let inputs = load_inputs(cfg, ALL)?;
    let (image, depth, mask) = (
        inputs.image.expect("loaded"),
        inputs.depth.expect("loaded"),
        inputs.mask.expect("loaded"),
    );
    let inversion = cfg.paths.inversion.as_deref().map(read_inversion).transpose()?;
    let dir = prepare_output(cfg)?;
    let out = run_edit(cfg, &image, &depth, &mask, inputs.background.as_ref(), inversion, dump_trajectory)?;
    write_edit(&out, cfg, &image, &dir)?;
    write_rgb_png(&out.reconstruction, dir.join("reconstruction.png"))?;
    Ok(())
}

pub fn cmd_eval(run: &Path, gt: &Path, out: Option<&Path>) -> CliResult<()> {
    for d in [run, gt] {
        if !d.is_dir() {
            return Err(CliError::Config(format!("missing directory: {}", d.display())));
        }
    }
    let report = evaluate_benchmark(run, gt)?;
    let dir = out.unwrap_or(run);
    create_dir(dir)?;
    write_json(&dir.join("report.json"), &report)?;
    let table = report.to_table();
    write_text(&dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}
