//! Invert, edit and generate, plus the on-disk layout of their outputs.

use std::fs;
use std::path::Path;

use handles_core::depth_edit::{edit_depth, DepthEditOptions, DepthEditResult};
use handles_core::diffusion::{
    ddim_invert, sample_guided, Denoiser, Inversion, InversionOptions, MockConfig, MockDenoiser, NoiseSchedule,
    SampleOptions, SampleOutput,
};
use handles_core::flow::FlowOptions;
use handles_core::geometry::CameraIntrinsics;
use handles_core::guidance::{edit_activations, GuidanceContext};
use handles_core::io::{
    read_activation_record, read_mask_png, read_pfm, read_pfm_map, read_rgb_png, write_activation_record,
    write_mask_png, write_pfm, write_pfm_map, write_rgb_png,
};
use handles_core::poisson::DEFAULT_TOLERANCE;
use handles_core::{FeatureMap, Mask, ScalarField};
use serde::Serialize;

use crate::codec::PixelCodec;
use crate::config::{EditConfig, Needs};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Inputs {
    pub image: Option<FeatureMap>,
    pub depth: Option<ScalarField>,
    pub mask: Option<Mask>,
    pub background: Option<ScalarField>,
}

fn check_size(cfg: &EditConfig, name: &str, w: usize, h: usize) -> CliResult<()> {
    if let Some([ew, eh]) = cfg.camera.resolution {
        if (ew, eh) != (w, h) {
            return Err(CliError::Config(format!("{name} is {w}x{h}, camera.resolution is {ew}x{eh}")));
        }
    }
    Ok(())
}

/// Validates `cfg` and reads the inputs `needs` asks for.
pub fn load_inputs(cfg: &EditConfig, needs: Needs) -> CliResult<Inputs> {
    cfg.validate(needs)?;
    let p = &cfg.paths;
    let image = match (&p.image, needs.image) {
        (Some(path), true) => Some(read_rgb_png(path)?),
        _ => None,
    };
    let depth = match (&p.depth, needs.depth) {
        (Some(path), true) => Some(read_pfm(path)?),
        _ => None,
    };
    let mask = match (&p.mask, needs.mask) {
        (Some(path), true) => Some(read_mask_png(path)?),
        _ => None,
    };
    let background = p.background_depth.as_ref().map(read_pfm).transpose()?;
    let mut size = None;
    for (name, dims) in [
        ("image", image.as_ref().map(|i| (i.width(), i.height()))),
        ("depth", depth.as_ref().map(|d| (d.width(), d.height()))),
        ("mask", mask.as_ref().map(|m| (m.width(), m.height()))),
        ("background depth", background.as_ref().map(|d| (d.width(), d.height()))),
    ] {
        let Some((w, h)) = dims else { continue };
        check_size(cfg, name, w, h)?;
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(CliError::Config(format!(
                    "{name} is {w}x{h}, other inputs are {}x{}",
                    s.0, s.1
                )))
            }
            _ => {}
        }
    }
    Ok(Inputs { image, depth, mask, background })
}

pub fn camera(cfg: &EditConfig, width: usize, height: usize) -> CliResult<CameraIntrinsics> {
    Ok(CameraIntrinsics::new(cfg.camera.fov_deg, width, height)?)
}

pub fn depth_options(cfg: &EditConfig) -> DepthEditOptions {
    DepthEditOptions {
        convention: cfg.flags.depth_convention,
        flow: FlowOptions {
            footprint: cfg.flags.splat_footprint,
            erosion_radius: cfg.flags.validity_erosion,
        },
        tolerance: DEFAULT_TOLERANCE,
    }
}

/// Edits the depth map. An identity transform returns the input depth
/// unchanged, so the denoiser sees the same conditioning as at inversion.
pub fn run_depth_edit(
    cfg: &EditConfig,
    depth: &ScalarField,
    mask: &Mask,
    background: Option<&ScalarField>,
) -> CliResult<DepthEditResult> {
    let cam = camera(cfg, depth.width(), depth.height())?;
    let mut out = edit_depth(depth, &cam, &cfg.transform, mask, background, &depth_options(cfg))?;
    if cfg.transform.is_identity() {
        out.edited_depth = depth.clone();
    }
    Ok(out)
}

/// Mock denoiser, codec and noise schedule for one input image.
pub struct Engine {
    pub codec: PixelCodec,
    pub denoiser: MockDenoiser,
    pub schedule: NoiseSchedule,
    refine_iters: usize,
}

impl Engine {
    /// The denoiser's prompt target is the encoded `image`.
    pub fn new(cfg: &EditConfig, image: &FeatureMap) -> CliResult<Self> {
        let d = &cfg.denoiser;
        let codec = PixelCodec {
            resolution: d.resolution,
            channels: d.channels,
        };
        let mock = MockConfig {
            gamma: d.gamma,
            seed: cfg.seed,
            depth_sensitivity: d.depth_sensitivity,
            ..Default::default()
        };
        let denoiser = MockDenoiser::with_mean_null(codec.encode(image)?, mock)?;
        Ok(Self {
            codec,
            denoiser,
            schedule: NoiseSchedule::new(cfg.schedule.total_steps)?,
            refine_iters: d.inversion_refine_iters,
        })
    }

    pub fn invert(&self, image: &FeatureMap, depth: &ScalarField) -> CliResult<Inversion> {
        let x0 = self.codec.encode(image)?;
        let options = InversionOptions {
            refine_iters: self.refine_iters,
            ..Default::default()
        };
        Ok(ddim_invert(&x0, &self.denoiser, depth, &self.schedule, options)?)
    }
}

/// Everything `edit` produces.
pub struct EditOutcome {
    pub depth: DepthEditResult,
    pub sample: SampleOutput,
    /// Decoded RGB result at the input resolution.
    pub image: FeatureMap,
    pub reconstruction: FeatureMap,
}

/// Full pipeline: invert (unless `inversion` is given), warp the recorded
/// activations, edit the depth and sample under guidance.
pub fn run_edit(
    cfg: &EditConfig,
    image: &FeatureMap,
    depth: &ScalarField,
    mask: &Mask,
    background: Option<&ScalarField>,
    inversion: Option<Inversion>,
    keep_trajectory: bool,
) -> CliResult<EditOutcome> {
    let engine = Engine::new(cfg, image)?;
    let inv = match inversion {
        Some(inv) => inv,
        None => engine.invert(image, depth)?,
    };
    let dres = run_depth_edit(cfg, depth, mask, background)?;
    let canonical = cfg.denoiser.resolution;
    let steps = engine.schedule.steps();
    let edited = edit_activations(&inv.record, &dres.flow, canonical, &engine.denoiser.layers(), steps)?;
    let ctx = GuidanceContext::new(
        edited,
        &dres.warped_object_mask,
        &dres.valid_mask,
        cfg.schedule.clone(),
        cfg.flags.bg_energy,
        canonical,
    )?;
    let options = SampleOptions {
        mode: cfg.flags.guidance_mode,
        keep_trajectory,
    };
    let sample = sample_guided(&inv.latent, &engine.denoiser, &dres.edited_depth, Some(&ctx), &engine.schedule, &options)?;
    let decoded = engine.codec.decode(&sample.x0, image)?;
    let reconstruction = engine.codec.decode(&inv.reconstruction, image)?;
    Ok(EditOutcome {
        depth: dres,
        sample,
        image: decoded,
        reconstruction,
    })
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

/// Writes each channel of `map` as `<base>.c<k>.pfm`.
pub fn write_channels(map: &FeatureMap, dir: &Path, base: &str) -> CliResult<()> {
    for c in 0..map.channels() {
        let plane = ScalarField::new(map.width(), map.height(), map.plane(c).to_vec())?;
        write_pfm(&plane, dir.join(format!("{base}.c{c}.pfm")))?;
    }
    Ok(())
}

/// Reads `<base>.c0.pfm`, `<base>.c1.pfm`, ... until one is missing.
pub fn read_channels(dir: &Path, base: &str) -> CliResult<FeatureMap> {
    let mut planes = Vec::new();
    while dir.join(format!("{base}.c{}.pfm", planes.len())).is_file() {
        planes.push(read_pfm(dir.join(format!("{base}.c{}.pfm", planes.len())))?);
    }
    let Some(first) = planes.first() else {
        return Err(CliError::Config(format!("missing {}", dir.join(format!("{base}.c0.pfm")).display())));
    };
    let (w, h) = (first.width(), first.height());
    let data = planes.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(FeatureMap::new(planes.len(), w, h, data)?)
}

/// Writes `xT.c*.pfm` and `activations.dhar`.
pub fn write_inversion(inv: &Inversion, dir: &Path) -> CliResult<()> {
    write_channels(&inv.latent, dir, "xT")?;
    write_activation_record(&inv.record, dir.join("activations.dhar"))?;
    Ok(())
}

/// Reads what [`write_inversion`] wrote. The reconstruction is not stored
/// and is left as the latent.
pub fn read_inversion(dir: &Path) -> CliResult<Inversion> {
    let latent = read_channels(dir, "xT")?;
    let record = read_activation_record(dir.join("activations.dhar"))?;
    Ok(Inversion {
        reconstruction: latent.clone(),
        latent,
        record,
    })
}

pub fn write_depth_edit(dres: &DepthEditResult, dir: &Path) -> CliResult<()> {
    write_pfm(&dres.edited_depth, dir.join("d_prime.pfm"))?;
    write_pfm(&dres.object_depth, dir.join("d_prime_object.pfm"))?;
    write_pfm(&dres.background_depth, dir.join("d_prime_background.pfm"))?;
    write_mask_png(&dres.warped_object_mask, dir.join("edited_mask.png"))?;
    write_mask_png(&dres.background_mask, dir.join("background_mask.png"))?;
    write_mask_png(&dres.valid_mask, dir.join("valid_mask.png"))?;
    dres.flow.write(dir.join("flow"))?;
    Ok(())
}

#[derive(Serialize)]
struct EnergyRow {
    step: usize,
    g_o: f64,
    g_b: f64,
}

pub fn write_energies(sample: &SampleOutput, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (step, e) in sample.energies.iter().enumerate() {
        w.serialize(EnergyRow {
            step,
            g_o: e.object,
            g_b: e.background,
        })
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes the results of [`run_edit`] into `dir`.
pub fn write_edit(out: &EditOutcome, cfg: &EditConfig, image: &FeatureMap, dir: &Path) -> CliResult<()> {
    write_rgb_png(&out.image, dir.join("result.png"))?;
    write_pfm_map(&out.image, dir.join("result.pfm"))?;
    write_channels(&out.sample.x0, dir, "result_latent")?;
    write_depth_edit(&out.depth, dir)?;
    write_energies(&out.sample, &dir.join("energies.csv"))?;
    if !out.sample.trajectory.is_empty() {
        let tdir = dir.join("trajectory");
        create_dir(&tdir)?;
        let codec = PixelCodec {
            resolution: cfg.denoiser.resolution,
            channels: cfg.denoiser.channels,
        };
        for (step, x) in out.sample.trajectory.iter().enumerate() {
            write_pfm_map(&codec.decode(x, image)?, tdir.join(format!("step_{step:03}.pfm")))?;
        }
        write_activation_record(&out.sample.record, tdir.join("activations.dhar"))?;
    }
    Ok(())
}

pub fn read_rgb_pfm(path: &Path) -> CliResult<FeatureMap> {
    Ok(read_pfm_map(path)?)
}
