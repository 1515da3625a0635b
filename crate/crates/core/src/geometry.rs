//! Pinhole camera, rigid transforms and the lift / transform / project maps.
//!
//! Camera space is right-handed with the camera at the origin, `+z` pointing
//! into the scene and `+y` up. Image rows grow downwards, so the normalized
//! image coordinate `v` increases as camera-space `y` decreases. Depth values
//! are perpendicular (`z`) depths.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, ScalarField};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fov_h_deg: f64,
    width: usize,
    height: usize,
}

impl CameraIntrinsics {
    pub const DEFAULT_FOV_DEG: f64 = 55.0;

    pub fn new(fov_h_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_h_deg > 0.0 && fov_h_deg < 180.0) {
            return Err(Error::InvalidArgument(format!(
                "horizontal fov {} outside (0, 180)",
                fov_h_deg
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidSize(format!("camera {}x{}", width, height)));
        }
        Ok(Self {
            fov_h_deg,
            width,
            height,
        })
    }

    pub fn with_size(&self, width: usize, height: usize) -> Result<Self> {
        Self::new(self.fov_h_deg, width, height)
    }

    pub fn fov_h_deg(&self) -> f64 {
        self.fov_h_deg
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `tan(fov_h / 2)`.
    pub fn tan_half_h(&self) -> f64 {
        (self.fov_h_deg.to_radians() * 0.5).tan()
    }

    /// `tan(fov_v / 2)` for square pixels.
    pub fn tan_half_v(&self) -> f64 {
        self.tan_half_h() * self.height as f64 / self.width as f64
    }

    /// Normalized coordinate of the center of pixel `(x, y)`.
    pub fn pixel_center(&self, x: usize, y: usize) -> [f64; 2] {
        [
            (x as f64 + 0.5) / self.width as f64,
            (y as f64 + 0.5) / self.height as f64,
        ]
    }

    /// Camera-space point seen at normalized coordinate `u` with `z`-depth `depth`.
    pub fn lift_point(&self, u: [f64; 2], depth: f64) -> Vec3 {
        Vec3::new(
            (u[0] - 0.5) * 2.0 * self.tan_half_h() * depth,
            -(u[1] - 0.5) * 2.0 * self.tan_half_v() * depth,
            depth,
        )
    }

    /// Ray direction (not normalized, `z = 1`) through normalized coordinate `u`.
    pub fn ray_direction(&self, u: [f64; 2]) -> Vec3 {
        self.lift_point(u, 1.0)
    }

    pub fn project_point(&self, p: &Vec3) -> Projection {
        if p.z <= 0.0 {
            return Projection {
                u: [f64::NAN, f64::NAN],
                in_front: false,
            };
        }
        Projection {
            u: [
                p.x / (p.z * 2.0 * self.tan_half_h()) + 0.5,
                0.5 - p.y / (p.z * 2.0 * self.tan_half_v()),
            ],
            in_front: true,
        }
    }
}

/// Result of projecting one point; `u` is not clamped to the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: [f64; 2],
    /// False when the point is at or behind the camera plane.
    pub in_front: bool,
}

impl Projection {
    pub fn in_frame(&self) -> bool {
        self.in_front && (0.0..=1.0).contains(&self.u[0]) && (0.0..=1.0).contains(&self.u[1])
    }
}

/// Rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about `axis` through the origin followed by a translation.
    /// A zero angle yields an exact identity rotation.
    pub fn from_axis_angle(axis: Vec3, angle_deg: f64, translation: Vec3) -> Result<Self> {
        let rotation = if angle_deg == 0.0 {
            Matrix3::identity()
        } else {
            let axis = Unit::try_new(axis, 1e-12)
                .ok_or_else(|| Error::InvalidArgument("rotation axis has zero length".into()))?;
            Rotation3::from_axis_angle(&axis, angle_deg.to_radians()).into_inner()
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Rotation about `axis` through `pivot`, then translation:
    /// `p -> R (p - c) + c + t`.
    pub fn about_pivot(axis: Vec3, angle_deg: f64, translation: Vec3, pivot: Vec3) -> Result<Self> {
        let r = Self::from_axis_angle(axis, angle_deg, Vec3::zeros())?;
        let t = if angle_deg == 0.0 {
            translation
        } else {
            pivot - r.rotation * pivot + translation
        };
        Ok(Self {
            rotation: r.rotation,
            translation: t,
        })
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Exact (bitwise) identity check.
    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vec3::zeros()
    }

    /// Max deviation of `RᵀR` from `I` and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Pivot of a user rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PivotRepr", into = "PivotRepr")]
pub enum Pivot {
    /// Centroid of the lifted object points.
    Centroid,
    Point([f64; 3]),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PivotRepr {
    Name(String),
    Point([f64; 3]),
}

impl TryFrom<PivotRepr> for Pivot {
    type Error = String;

    fn try_from(r: PivotRepr) -> std::result::Result<Self, String> {
        match r {
            PivotRepr::Name(s) if s == "centroid" => Ok(Pivot::Centroid),
            PivotRepr::Name(s) => Err(format!("unknown pivot {:?}, expected \"centroid\" or [x, y, z]", s)),
            PivotRepr::Point(p) => Ok(Pivot::Point(p)),
        }
    }
}

impl From<Pivot> for PivotRepr {
    fn from(p: Pivot) -> Self {
        match p {
            Pivot::Centroid => PivotRepr::Name("centroid".into()),
            Pivot::Point(p) => PivotRepr::Point(p),
        }
    }
}

/// User-facing edit description as stored in configs and `edit.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub axis: [f64; 3],
    pub angle_deg: f64,
    pub translation: [f64; 3],
    #[serde(default = "default_pivot")]
    pub pivot: Pivot,
}

fn default_pivot() -> Pivot {
    Pivot::Centroid
}

impl Default for EditSpec {
    fn default() -> Self {
        Self {
            axis: [0.0, 1.0, 0.0],
            angle_deg: 0.0,
            translation: [0.0; 3],
            pivot: Pivot::Centroid,
        }
    }
}

impl EditSpec {
    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.translation == [0.0; 3]
    }

    /// Resolve to a rigid transform; `centroid` is used for [`Pivot::Centroid`].
    pub fn resolve(&self, centroid: Option<Vec3>) -> Result<RigidTransform> {
        let pivot = match self.pivot {
            Pivot::Point(p) => Vec3::from(p),
            Pivot::Centroid if self.angle_deg == 0.0 => Vec3::zeros(),
            Pivot::Centroid => centroid.ok_or_else(|| {
                Error::InvalidArgument("centroid pivot needs a nonempty object mask".into())
            })?,
        };
        RigidTransform::about_pivot(
            Vec3::from(self.axis),
            self.angle_deg,
            Vec3::from(self.translation),
            pivot,
        )
    }

    /// The edit undoing this one, expressed about the moved pivot.
    pub fn inverse(&self, centroid: Option<Vec3>) -> Result<EditSpec> {
        let t = Vec3::from(self.translation);
        let pivot = match self.pivot {
            Pivot::Point(p) => Some(Vec3::from(p)),
            Pivot::Centroid => centroid,
        };
        Ok(EditSpec {
            axis: self.axis,
            angle_deg: -self.angle_deg,
            translation: (-t).into(),
            pivot: match pivot {
                Some(c) => Pivot::Point((c + t).into()),
                None => Pivot::Centroid,
            },
        })
    }
}

/// Per-pixel camera-space points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrid {
    width: usize,
    height: usize,
    points: Vec<Vec3>,
}

impl PointGrid {
    pub fn new(width: usize, height: usize, points: Vec<Vec3>) -> Result<Self> {
        if points.len() != width * height {
            return Err(Error::InvalidSize(format!(
                "{}x{} grid needs {} points, got {}",
                width,
                height,
                width * height,
                points.len()
            )));
        }
        Ok(Self {
            width,
            height,
            points,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &Vec3 {
        &self.points[y * self.width + x]
    }

    pub fn centroid(&self, mask: &Mask) -> Option<Vec3> {
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        for (i, p) in self.points.iter().enumerate() {
            if mask.at(i) {
                sum += p;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Lift a `z`-depth map to camera-space points at pixel centers.
pub fn lift(depth: &ScalarField, cam: &CameraIntrinsics) -> Result<PointGrid> {
    let (w, h) = (depth.width(), depth.height());
    let cam = cam.with_size(w, h)?;
    let mut points = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y);
            if d <= 0.0 {
                return Err(Error::NonPositiveDepth { x, y, value: d });
            }
            points.push(cam.lift_point(cam.pixel_center(x, y), d as f64));
        }
    }
    PointGrid::new(w, h, points)
}

pub fn project(points: &[Vec3], cam: &CameraIntrinsics) -> Vec<Projection> {
    points.iter().map(|p| cam.project_point(p)).collect()
}

/// Move the masked points by `edit`; other points are copied unchanged.
pub fn apply_edit(points: &PointGrid, edit: &RigidTransform, object: &Mask) -> Result<PointGrid> {
    if object.width() != points.width || object.height() != points.height {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs points {}x{}",
            object.width(),
            object.height(),
            points.width,
            points.height
        )));
    }
    let moved = points
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| if object.at(i) { edit.apply(p) } else { *p })
        .collect();
    PointGrid::new(points.width, points.height, moved)
}
