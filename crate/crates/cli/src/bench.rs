//! Synthetic benchmark: sample directories, batch editing and scoring.

use std::path::{Path, PathBuf};

use handles_core::geometry::{lift, EditSpec, Pivot};
use handles_core::io::{write_mask_png, write_pfm, write_pfm_map, write_rgb_png};
use handles_core::scenes::{check_edit, render, render_edited, sample_benchmark, BenchmarkConfig, EditSample};
use handles_core::{FeatureMap, Mask, ScalarField};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EditConfig, Needs};
use crate::error::{CliError, CliResult};
use crate::pipeline::{camera, create_dir, load_inputs, run_edit, write_edit, write_json, write_text};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub count: usize,
    pub seed: u64,
    pub config: BenchmarkConfig,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:03}")
}

/// Samples `n` edits and writes one directory per sample under `out`.
pub fn generate(out: &Path, n: usize, seed: u64, cfg: &BenchmarkConfig) -> CliResult<Vec<EditSample>> {
    let samples = sample_benchmark(n, seed, cfg)?;
    create_dir(out)?;
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| write_sample(&out.join(sample_id(i)), s, cfg))
        .collect::<CliResult<Vec<()>>>()?;
    write_json(
        &out.join("benchmark.json"),
        &BenchmarkManifest {
            count: n,
            seed,
            config: *cfg,
        },
    )?;
    Ok(samples)
}

fn write_sample(dir: &Path, s: &EditSample, cfg: &BenchmarkConfig) -> CliResult<()> {
    let edit = s.transform()?;
    if check_edit(&s.scene, &edit, cfg)?.is_none() {
        return Err(CliError::Core(handles_core::Error::InvalidArgument(format!(
            "sampled edit for {} fails its constraints on re-check",
            dir.display()
        ))));
    }
    create_dir(dir)?;
    let before = render(&s.scene)?;
    let after = render_edited(&s.scene, &edit)?;
    write_pfm(&before.depth, dir.join("depth.pfm"))?;
    write_rgb_png(&before.image, dir.join("image.png"))?;
    write_mask_png(&before.mask, dir.join("mask.png"))?;
    write_pfm(&after.depth, dir.join("gt_depth.pfm"))?;
    write_mask_png(&after.mask, dir.join("gt_mask.png"))?;
    write_rgb_png(&after.image, dir.join("gt_image.png"))?;
    write_json(&dir.join("edit.json"), &s.edit)?;
    write_json(&dir.join("sample.json"), s)?;
    Ok(())
}

/// Sorted names of the sample directories in `dir`.
pub fn sample_dirs(dir: &Path) -> CliResult<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: Vec<String>,
    pub failures: Vec<SampleFailure>,
}

/// Edits every sample of `gt_dir`, then applies the inverse edit to the
/// result for the cycle metric. Failed samples are recorded and skipped.
pub fn run(gt_dir: &Path, run_dir: &Path, base: &EditConfig) -> CliResult<RunSummary> {
    let ids = sample_dirs(gt_dir)?;
    create_dir(run_dir)?;
    let results: Vec<(String, CliResult<()>)> = ids
        .par_iter()
        .map(|id| {
            log::info!("sample {id}");
            (id.clone(), run_sample(&gt_dir.join(id), &run_dir.join(id), base))
        })
        .collect();
    let mut summary = RunSummary {
        completed: Vec::new(),
        failures: Vec::new(),
    };
    for (id, r) in results {
        match r {
            Ok(()) => summary.completed.push(id),
            Err(e) => {
                log::warn!("sample {id} failed: {e}");
                summary.failures.push(SampleFailure { id, error: e.to_string() });
            }
        }
    }
    write_json(&run_dir.join("run.json"), &summary)?;
    Ok(summary)
}

fn read_sample(dir: &Path) -> CliResult<EditSample> {
    let path = dir.join("sample.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid {}: {e}", path.display())))
}

/// Edit that undoes `edit`, with the pivot resolved from the object points.
fn inverse_edit(cfg: &EditConfig, edit: &EditSpec, depth: &ScalarField, mask: &Mask) -> CliResult<EditSpec> {
    let centroid = match edit.pivot {
        Pivot::Point(_) => None,
        Pivot::Centroid => {
            let cam = camera(cfg, depth.width(), depth.height())?;
            let z = cfg.flags.depth_convention.to_z(depth, &cam)?;
            lift(&z, &cam)?.centroid(mask)
        }
    };
    Ok(edit.inverse(centroid)?)
}

fn sample_config(base: &EditConfig, sample: &EditSample, gt: &Path, out: &Path) -> EditConfig {
    let mut cfg = base.clone();
    cfg.camera.fov_deg = sample.scene.rig.fov_deg;
    cfg.camera.resolution = Some([sample.scene.rig.width, sample.scene.rig.height]);
    cfg.transform = sample.edit;
    cfg.paths.depth = Some(gt.join("depth.pfm"));
    cfg.paths.image = Some(gt.join("image.png"));
    cfg.paths.mask = Some(gt.join("mask.png"));
    cfg.paths.background_depth = None;
    cfg.paths.inversion = None;
    cfg.paths.output = Some(out.to_path_buf());
    cfg
}

/// One benchmark sample: forward edit into `out`, then the inverse edit of
/// the result, written as `cycle.pfm`.
pub fn run_sample(gt: &Path, out: &Path, base: &EditConfig) -> CliResult<()> {
    let sample = read_sample(gt)?;
    let cfg = sample_config(base, &sample, gt, out);
    let inputs = load_inputs(&cfg, Needs { depth: true, image: true, mask: true })?;
    let (image, depth, mask) = (
        inputs.image.expect("loaded"),
        inputs.depth.expect("loaded"),
        inputs.mask.expect("loaded"),
    );
    create_dir(out)?;
    let fwd = run_edit(&cfg, &image, &depth, &mask, None, None, false)?;
    write_edit(&fwd, &cfg, &image, out)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;

    let mut back_cfg = cfg.clone();
    back_cfg.transform = inverse_edit(&cfg, &cfg.transform, &depth, &mask)?;
    let back = run_edit(
        &back_cfg,
        &fwd.image,
        &fwd.depth.edited_depth,
        &fwd.depth.warped_object_mask,
        None,
        None,
        false,
    )?;
    write_cycle(&back.image, out)?;
    Ok(())
}

fn write_cycle(image: &FeatureMap, out: &Path) -> CliResult<()> {
    write_pfm_map(image, out.join("cycle.pfm"))?;
    write_rgb_png(image, out.join("cycle.png"))?;
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("benchmark.json")
}
