//! Run configuration: strict JSON with defaults, plus command-line overrides.

use std::path::{Path, PathBuf};

use handles_core::depth_edit::DepthConvention;
use handles_core::diffusion::GuidanceMode;
use handles_core::flow::SplatFootprint;
use handles_core::geometry::{CameraIntrinsics, EditSpec};
use handles_core::guidance::{BackgroundEnergy, GuidanceSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fov_deg: f64,
    /// Expected `[width, height]` of the inputs; unchecked when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 2]>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fov_deg: CameraIntrinsics::DEFAULT_FOV_DEG,
            resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub depth_convention: DepthConvention,
    pub guidance_mode: GuidanceMode,
    pub bg_energy: BackgroundEnergy,
    pub splat_footprint: SplatFootprint,
    pub validity_erosion: usize,
    /// Disocclusion threshold used by `bench generate`.
    pub delta: f64,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            depth_convention: DepthConvention::Z,
            guidance_mode: GuidanceMode::Nudge,
            bg_energy: BackgroundEnergy::PerChannel,
            splat_footprint: SplatFootprint::Adaptive,
            validity_erosion: 0,
            delta: 0.3,
        }
    }
}

/// Sample space of the mock denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Side of the square sample grid.
    pub resolution: usize,
    /// 3 (RGB) or 4 (RGB plus luminance).
    pub channels: usize,
    pub gamma: f64,
    pub depth_sensitivity: f64,
    /// Fixed-point refinement iterations per inversion step.
    pub inversion_refine_iters: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: 4,
            gamma: 0.3,
            depth_sensitivity: 0.05,
            inversion_refine_iters: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background_depth: Option<PathBuf>,
    /// Directory holding `xT.c*.pfm` and `activations.dhar` from `invert`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inversion: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub camera: CameraConfig,
    pub transform: EditSpec,
    pub schedule: GuidanceSchedule,
    pub flags: Flags,
    pub denoiser: DenoiserConfig,
    pub paths: Paths,
    pub seed: u64,
}

/// Which inputs a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub depth: bool,
    pub image: bool,
    pub mask: bool,
}

impl EditConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Loads `path` (or defaults) and applies `overrides`, each a JSON
    /// pointer with a value, before strict parsing.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let mut value = serde_json::to_value(&base).expect("config serializes");
        for (pointer, v) in overrides {
            set_pointer(&mut value, pointer, v.clone());
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid option: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks values and that every referenced input exists.
    pub fn validate(&self, needs: Needs) -> CliResult<()> {
        self.schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let d = &self.denoiser;
        if !(3..=4).contains(&d.channels) {
            return Err(CliError::Config(format!("denoiser.channels must be 3 or 4, got {}", d.channels)));
        }
        if d.resolution == 0 || !d.resolution.is_multiple_of(2) {
            return Err(CliError::Config(format!(
                "denoiser.resolution must be a positive even number, got {}",
                d.resolution
            )));
        }
        if !(0.0..1.0).contains(&d.gamma) {
            return Err(CliError::Config(format!("denoiser.gamma must lie in [0, 1), got {}", d.gamma)));
        }
        let required = [
            ("depth", needs.depth, &self.paths.depth),
            ("image", needs.image, &self.paths.image),
            ("mask", needs.mask, &self.paths.mask),
        ];
        for (name, needed, path) in required {
            match path {
                None if needed => return Err(CliError::Config(format!("no {name} file given"))),
                Some(p) if needed && !p.is_file() => {
                    return Err(CliError::Config(format!("missing {name} file: {}", p.display())))
                }
                _ => {}
            }
        }
        for (name, path) in [("background depth", &self.paths.background_depth)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::Config(format!("missing {name} file: {}", p.display())));
                }
            }
        }
        if let Some(dir) = &self.paths.inversion {
            if !dir.join("activations.dhar").is_file() {
                return Err(CliError::Config(format!(
                    "missing inversion artifacts: {}",
                    dir.join("activations.dhar").display()
                )));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> CliResult<&Path> {
        self.paths
            .output
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory given".into()))
    }
}

fn set_pointer(root: &mut Value, pointer: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = pointer.trim_start_matches('/').split('/').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return;
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip() {
        let cfg = EditConfig::default();
        assert_eq!(EditConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(EditConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(EditConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(EditConfig::from_json(r#"{"flags": {"delta": 0.2, "bogus": true}}"#).is_err());
        assert!(EditConfig::from_json(r#"{"schedule": {"lamda": 1.0}}"#).is_err());
    }

    #[test]
    fn overrides_apply_before_parsing() {
        let cfg = EditConfig::resolve(
            None,
            &[
                ("/flags/guidance_mode".into(), json!("epsilon")),
                ("/transform/angle_deg".into(), json!(12.5)),
                ("/paths/output".into(), json!("out")),
            ],
        )
        .unwrap();
        assert_eq!(cfg.flags.guidance_mode, GuidanceMode::Epsilon);
        assert_eq!(cfg.transform.angle_deg, 12.5);
        assert_eq!(cfg.paths.output, Some(PathBuf::from("out")));
        assert!(EditConfig::resolve(None, &[("/flags/guidance_mode".into(), json!("sideways"))]).is_err());
    }

    #[test]
    fn missing_inputs_name_the_path() {
        let mut cfg = EditConfig::default();
        cfg.paths.depth = Some("/nonexistent/depth.pfm".into());
        let needs = Needs { depth: true, image: false, mask: false };
        let err = cfg.validate(needs).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/depth.pfm"));
    }
}
