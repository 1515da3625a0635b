//! Edited depth: the moved object's depth composited over the background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{build_flow, warp_mask, FlowField, FlowOptions};
use crate::geometry::{lift, CameraIntrinsics, EditSpec, PointGrid, RigidTransform, Vec3};
use crate::poisson::{harmonic_infill, seamless_composite, DEFAULT_TOLERANCE};
use crate::raster::{bilinear_taps, Mask, ScalarField};

/// Radius of the dilation applied to the object before infilling the background.
pub const BACKGROUND_DILATION: usize = 3;
/// Radius of the closing that decides which flow holes belong to the moved object.
pub const FOOTPRINT_CLOSING: usize = 2;

/// What a depth value measures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthConvention {
    /// Perpendicular distance to the image plane.
    #[default]
    Z,
    /// Distance to the camera center along the ray.
    Euclidean,
}

impl DepthConvention {
    /// Depth of a camera-space point under this convention.
    pub fn of_point(self, p: &Vec3) -> f64 {
        match self {
            DepthConvention::Z => p.z,
            DepthConvention::Euclidean => p.norm(),
        }
    }

    /// Converts a depth map in this convention to `z`-depth.
    pub fn to_z(self, depth: &ScalarField, cam: &CameraIntrinsics) -> Result<ScalarField> {
        match self {
            DepthConvention::Z => Ok(depth.clone()),
            DepthConvention::Euclidean => {
                let cam = cam.with_size(depth.width(), depth.height())?;
                ScalarField::from_fn(depth.width(), depth.height(), |x, y| {
                    let len = cam.ray_direction(cam.pixel_center(x, y)).norm();
                    (depth.get(x, y) as f64 / len) as f32
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthEditOptions {
    pub convention: DepthConvention,
    pub flow: FlowOptions,
    pub tolerance: f64,
}

impl Default for DepthEditOptions {
    fn default() -> Self {
        Self {
            convention: DepthConvention::Z,
            flow: FlowOptions::default(),
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DepthEditResult {
    /// `d'`.
    pub edited_depth: ScalarField,
    /// `d'_o` on `M'_o`, zero elsewhere.
    pub object_depth: ScalarField,
    /// `d'_b`.
    pub background_depth: ScalarField,
    /// `M'_o = warp(M_o) ∧ M_v`.
    pub warped_object_mask: Mask,
    /// `M'_b = ¬M'_o`.
    pub background_mask: Mask,
    /// `M_v`.
    pub valid_mask: Mask,
    /// `M'_o` plus the flow holes enclosed by it.
    pub object_footprint: Mask,
    pub flow: FlowField,
    /// The resolved rigid transform.
    pub transform: RigidTransform,
}

/// `d'_o(u)`: depth of the transformed points pulled back through `flow`.
///
/// Only points of `object` are interpolated, so silhouettes do not blend
/// object and background depths. Pixels outside `region` are 0.
pub fn transformed_object_depth(
    transformed: &PointGrid,
    flow: &FlowField,
    object: &Mask,
    region: &Mask,
    convention: DepthConvention,
) -> Result<ScalarField> {
    let (w, h) = (transformed.width(), transformed.height());
    if flow.width() != w || flow.height() != h || !object.same_size(region) || object.width() != w || object.height() != h
    {
        return Err(Error::ShapeMismatch("point grid, flow and masks differ in size".into()));
    }
    let pts = transformed.points();
    ScalarField::from_fn(w, h, |x, y| {
        if !region.get(x, y) {
            return 0.0;
        }
        let (sx, sy) = flow.source_pixel(x, y);
        let (x0, x1, y0, y1, fx, fy) = bilinear_taps(sx, sy, w, h);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        let mut acc = Vec3::zeros();
        let mut total = 0.0;
        for &(tx, ty, wt) in &taps {
            if wt > 0.0 && object.get(tx, ty) {
                acc += pts[ty * w + tx] * wt;
                total += wt;
            }
        }
        let p = if total > 0.0 {
            acc / total
        } else {
            let (nx, ny) = (
                (sx.round() as usize).min(w - 1),
                (sy.round() as usize).min(h - 1),
            );
            pts[ny * w + nx]
        };
        convention.of_point(&p) as f32
    })
}

/// `d'_b`: the provided background depth, or the depth with the dilated
/// object region infilled harmonically.
pub fn background_depth(depth: &ScalarField, object: &Mask, provided: Option<&ScalarField>, tol: f64) -> Result<ScalarField> {
    if let Some(bg) = provided {
        if bg.width() != depth.width() || bg.height() != depth.height() {
            return Err(Error::ShapeMismatch("background depth differs from depth".into()));
        }
        return Ok(bg.clone());
    }
    harmonic_infill(depth, &object.dilate(BACKGROUND_DILATION), tol)
}

fn closing(mask: &Mask, r: usize) -> Mask {
    mask.dilate(r).erode(r)
}

/// Edits `depth` by moving the `object` pixels with `edit`.
pub fn edit_depth(
    depth: &ScalarField,
    cam: &CameraIntrinsics,
    edit: &EditSpec,
    object: &Mask,
    provided_bg: Option<&ScalarField>,
    options: &DepthEditOptions,
) -> Result<DepthEditResult> {
    if !object.same_size(depth) {
        return Err(Error::ShapeMismatch("object mask differs from depth".into()));
    }
    let cam = cam.with_size(depth.width(), depth.height())?;
    let z = options.convention.to_z(depth, &cam)?;
    let points = lift(&z, &cam)?;
    let transform = edit.resolve(points.centroid(object))?;
    let build = build_flow(&z, &cam, &transform, object, options.flow)?;
    let valid = build.flow.valid().clone();
    let warped = warp_mask(object, &build.flow)?.and(&valid)?;
    if warped.is_empty() {
        return Err(Error::EditOutOfFrame);
    }
    let object_depth = transformed_object_depth(&build.transformed, &build.flow, object, &warped, options.convention)?;
    let bg = background_depth(depth, object, provided_bg, options.tolerance)?;
    let pasted: Vec<f32> = (0..depth.data().len())
        .map(|i| if warped.at(i) { object_depth.data()[i] } else { bg.data()[i] })
        .collect();
    let pasted = ScalarField::new(depth.width(), depth.height(), pasted)?;
    let composite = seamless_composite(&pasted, &bg, &warped, options.tolerance)?;
    let footprint = closing(&warped, FOOTPRINT_CLOSING);
    let holes = valid.not().and(&footprint)?;
    let edited_depth = harmonic_infill(&composite, &holes, options.tolerance)?;
    Ok(DepthEditResult {
        edited_depth,
        object_depth,
        background_depth: bg,
        background_mask: warped.not(),
        object_footprint: warped.or(&holes)?,
        warped_object_mask: warped,
        valid_mask: valid,
        flow: build.flow,
        transform,
    })
}
