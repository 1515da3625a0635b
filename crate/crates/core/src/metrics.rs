//! Edit adherence (mask IoU) and identity preservation (cycle L1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mask_png, read_pfm_map, read_rgb_png};
use crate::raster::{FeatureMap, Mask};

/// `|a ∧ b| / |a ∨ b|`, 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.and(b)?.count();
    let union = a.or(b)?.count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean absolute difference over all pixels and channels.
pub fn cycle_consistency_l1(x0: &FeatureMap, edited_back: &FeatureMap) -> Result<f64> {
    if !x0.same_shape(edited_back) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x0.shape(),
            edited_back.shape()
        )));
    }
    let n = x0.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = x0
        .data()
        .iter()
        .zip(edited_back.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    /// `S_edit`.
    pub iou: f64,
    /// `E_id^L1`.
    pub e_id_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleScore>,
    pub mean_iou: f64,
    pub mean_e_id_l1: f64,
    pub count: usize,
    pub lpips: String,
    /// Where the evaluated masks came from.
    pub mask_source: String,
}

impl EvalReport {
    pub fn from_scores(samples: Vec<SampleScore>, mask_source: &str) -> Self {
        let count = samples.len();
        let mean = |f: fn(&SampleScore) -> f64| {
            if count == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / count as f64
            }
        };
        Self {
            mean_iou: mean(|s| s.iou),
            mean_e_id_l1: mean(|s| s.e_id_l1),
            count,
            samples,
            lpips: "unavailable".into(),
            mask_source: mask_source.into(),
        }
    }

    /// Aligned plain-text table; `E_id` is shown ×10.
    pub fn to_table(&self) -> String {
        let width = self.samples.iter().map(|s| s.id.len()).chain([6]).max().unwrap_or(6);
        let mut out = format!("{:<width$}  {:>8}  {:>13}\n", "sample", "S_edit", "E_id L1 (x10)");
        for s in &self.samples {
            out += &format!("{:<width$}  {:>8.4}  {:>13.4}\n", s.id, s.iou, s.e_id_l1 * 10.0);
        }
        out += &format!("{:<width$}  {:>8.4}  {:>13.4}\n", "mean", self.mean_iou, self.mean_e_id_l1 * 10.0);
        out += &format!("samples: {}  lpips: {}  masks: {}\n", self.count, self.lpips, self.mask_source);
        out
    }
}

pub const MASK_SOURCE: &str = "pipeline warped object mask (edited_mask.png), gt_mask.png when absent";

fn sample_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<std::path::PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.exists())
}

/// Scores every sample of `gt_dir` against the matching directory of `run_dir`.
///
/// A run sample provides `edited_mask.png` and `cycle.pfm`; when either is
/// absent the ground-truth files of the same directory (`gt_mask.png`,
/// `image.png`) are used, so a ground-truth tree can be scored against itself.
pub fn evaluate_benchmark(run_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let ids = sample_ids(gt_dir)?;
    let missing: Vec<String> = ids.iter().filter(|id| !run_dir.join(id).is_dir()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingSamples(missing));
    }
    let mut scores = Vec::with_capacity(ids.len());
    for id in ids {
        let gt = gt_dir.join(&id);
        let run = run_dir.join(&id);
        let gt_mask = read_mask_png(gt.join("gt_mask.png"))?;
        let mask_path = first_existing(&run, &["edited_mask.png", "gt_mask.png"])
            .ok_or_else(|| Error::MissingSamples(vec![format!("{}/edited_mask.png", id)]))?;
        let mask = read_mask_png(mask_path)?;
        let x0 = read_rgb_png(gt.join("image.png"))?;
        let back = match first_existing(&run, &["cycle.pfm"]) {
            Some(p) => read_pfm_map(p)?,
            None => read_rgb_png(run.join("image.png"))?,
        };
        scores.push(SampleScore {
            iou: iou(&mask, &gt_mask)?,
            e_id_l1: cycle_consistency_l1(&x0, &back)?,
            id,
        });
    }
    Ok(EvalReport::from_scores(scores, MASK_SOURCE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = Mask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let b = Mask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a.not()).unwrap(), 0.0);
        let empty = Mask::filled(2, 2, false);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(iou(&a, &Mask::filled(3, 2, false)).is_err());
    }

    #[test]
    fn cycle_cases() {
        let x = FeatureMap::from_fn(3, 4, 4, |c, x, y| ((c + x + y) % 2) as f32).unwrap();
        assert_eq!(cycle_consistency_l1(&x, &x).unwrap(), 0.0);
        let inv = x.map(|v| 1.0 - v);
        assert_eq!(cycle_consistency_l1(&x, &inv).unwrap(), 1.0);
        let half = FeatureMap::from_fn(3, 4, 4, |_, _, _| 0.5).unwrap();
        let off = half.map(|v| v + 0.1);
        assert!((cycle_consistency_l1(&half, &off).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn report_means_and_table() {
        let r = EvalReport::from_scores(
            vec![
                SampleScore { id: "a".into(), iou: 1.0, e_id_l1: 0.02 },
                SampleScore { id: "b".into(), iou: 0.5, e_id_l1: 0.04 },
            ],
            "test",
        );
        assert_eq!(r.mean_iou, 0.75);
        assert!((r.mean_e_id_l1 - 0.03).abs() < 1e-12);
        let table = r.to_table();
        assert!(table.contains("0.3000"));
        assert!(table.contains("lpips: unavailable"));
    }
}
