//! 3D-aware flow fields.
//!
//! [`build_flow`] inverts the map `project ∘ edit ∘ lift` by forward-splatting
//! every source pixel into the target grid and resolving overlaps with a
//! z-buffer (closest to the camera wins). Target pixels that receive no
//! splat are holes. [`warp`] then realizes `W[X, F](u) = X(u - F(u))`.

use std::path::Path;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::geometry::{apply_edit, lift, CameraIntrinsics, PointGrid, RigidTransform, Vec3};
use crate::io::{read_mask_png, read_pfm, write_mask_png, write_pfm};
use crate::raster::{
    resample_bilinear, resample_mask, sample_plane, FeatureMap, Mask, MaskResample, ScalarField,
};

/// Distances closer than this are treated as ties; the lower source index wins.
pub const ZBUFFER_TIE_TOLERANCE: f64 = 1e-6;

/// Largest half-width (in target pixels) of an adaptive splat footprint.
const MAX_FOOTPRINT_HALF_WIDTH: f64 = 2.0;

/// Relative depth jump above which two neighboring source pixels are treated
/// as lying on different surfaces.
const SURFACE_CONTINUITY: f64 = 0.1;

/// Extra footprint half-width for silhouette sources, which stand for
/// partially covered pixels.
const SILHOUETTE_PAD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplatFootprint {
    /// Each moved source lands only in the target pixel containing its projection.
    Nearest,
    /// Moved sources also cover every target pixel center inside their
    /// projected pixel footprint, estimated from projected neighbors. This
    /// closes pinholes when a surface is magnified.
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlowOptions {
    pub footprint: SplatFootprint,
    /// Erode the valid mask by this many pixels after splatting.
    pub erosion_radius: usize,
}

/// Per-pixel displacement in normalized units plus the valid mask `M_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    du: Vec<f32>,
    dv: Vec<f32>,
    valid: Mask,
}

impl FlowField {
    /// Builds a flow, zeroing displacements at invalid pixels.
    pub fn new(width: usize, height: usize, mut du: Vec<f32>, mut dv: Vec<f32>, valid: Mask) -> Result<Self> {
        if du.len() != width * height || dv.len() != width * height || valid.width() != width || valid.height() != height {
            return Err(Error::InvalidSize(format!("flow components do not match {}x{}", width, height)));
        }
        if du.iter().chain(&dv).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite flow".into()));
        }
        for i in 0..width * height {
            if !valid.at(i) {
                du[i] = 0.0;
                dv[i] = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            du,
            dv,
            valid,
        })
    }

    pub fn zero(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            du: vec![0.0; width * height],
            dv: vec![0.0; width * height],
            valid: Mask::filled(width, height, true),
        }
    }

    /// Constant displacement; pixels whose source falls outside the frame are invalid.
    pub fn constant(width: usize, height: usize, du: f32, dv: f32) -> Self {
        let valid = Mask::from_fn(width, height, |x, y| {
            let sx = x as f64 - du as f64 * width as f64;
            let sy = y as f64 - dv as f64 * height as f64;
            sx > -0.5 && sy > -0.5 && sx < width as f64 - 0.5 && sy < height as f64 - 0.5
        });
        Self::new(width, height, vec![du; width * height], vec![dv; width * height], valid).expect("sizes match")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn du(&self) -> &[f32] {
        &self.du
    }

    pub fn dv(&self) -> &[f32] {
        &self.dv
    }

    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    pub fn is_zero(&self) -> bool {
        self.du.iter().chain(&self.dv).all(|&v| v == 0.0)
    }

    /// Source position of target pixel `(x, y)` in fractional pixel units.
    #[inline]
    pub fn source_pixel(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (
            x as f64 - self.du[i] as f64 * self.width as f64,
            y as f64 - self.dv[i] as f64 * self.height as f64,
        )
    }

    pub fn with_valid(&self, valid: Mask) -> Result<Self> {
        Self::new(self.width, self.height, self.du.clone(), self.dv.clone(), valid)
    }

    /// Writes `<base>.u.pfm`, `<base>.v.pfm` and `<base>.valid.png`.
    pub fn write(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref().to_string_lossy().into_owned();
        write_pfm(&ScalarField::new(self.width, self.height, self.du.clone())?, format!("{base}.u.pfm"))?;
        write_pfm(&ScalarField::new(self.width, self.height, self.dv.clone())?, format!("{base}.v.pfm"))?;
        write_mask_png(&self.valid, format!("{base}.valid.png"))
    }

    pub fn read(base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref().to_string_lossy().into_owned();
        let du = read_pfm(format!("{base}.u.pfm"))?;
        let dv = read_pfm(format!("{base}.v.pfm"))?;
        let valid = read_mask_png(format!("{base}.valid.png"))?;
        if du.width() != dv.width() || du.height() != dv.height() {
            return Err(Error::ShapeMismatch("flow u/v components differ in size".into()));
        }
        Self::new(du.width(), du.height(), du.into_data(), dv.into_data(), valid)
    }
}

/// Output of [`build_flow`].
#[derive(Debug, Clone)]
pub struct FlowBuild {
    pub flow: FlowField,
    /// Edited camera-space points, indexed by source pixel.
    pub transformed: PointGrid,
    /// Winning source pixel index per target pixel.
    pub winners: Vec<Option<usize>>,
}

/// One splat of a source pixel into a target pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatCandidate {
    pub target: usize,
    /// Camera distance (Euclidean norm) of the transformed point.
    pub distance: f64,
    /// Sub-pixel source position (pixel units) the target samples from.
    pub source_pos: (f64, f64),
}

/// Forward-splatting context shared by [`build_flow`] and external checks.
pub struct Splatter<'a> {
    cam: CameraIntrinsics,
    depth: &'a ScalarField,
    object: &'a Mask,
    moved: bool,
    transformed: PointGrid,
    footprint: SplatFootprint,
}

impl<'a> Splatter<'a> {
    pub fn new(
        depth: &'a ScalarField,
        cam: &CameraIntrinsics,
        edit: &RigidTransform,
        object: &'a Mask,
        footprint: SplatFootprint,
    ) -> Result<Self> {
        if !object.same_size(depth) {
            return Err(Error::ShapeMismatch(format!(
                "object mask {}x{} vs depth {}x{}",
                object.width(),
                object.height(),
                depth.width(),
                depth.height()
            )));
        }
        let cam = cam.with_size(depth.width(), depth.height())?;
        let points = lift(depth, &cam)?;
        let transformed = apply_edit(&points, edit, object)?;
        Ok(Self {
            cam,
            depth,
            object,
            moved: !edit.is_identity(),
            transformed,
            footprint,
        })
    }

    pub fn transformed(&self) -> &PointGrid {
        &self.transformed
    }

    fn is_moved(&self, s: usize) -> bool {
        self.moved && self.object.at(s)
    }

    /// Projected position of source `s` in target pixel units, if in front.
    fn projected_px(&self, s: usize) -> Option<(f64, f64)> {
        let p = self.cam.project_point(&self.transformed.points()[s]);
        p.in_front.then(|| {
            (
                p.u[0] * self.cam.width() as f64 - 0.5,
                p.u[1] * self.cam.height() as f64 - 0.5,
            )
        })
    }

    fn continuous(&self, s: usize, n: usize) -> bool {
        if self.is_moved(n) != self.is_moved(s) {
            return false;
        }
        let (ds, dn) = (self.depth.data()[s] as f64, self.depth.data()[n] as f64);
        (ds - dn).abs() <= SURFACE_CONTINUITY * ds
    }

    /// Derivative of the projected position along one source axis, from
    /// neighbors on the same surface.
    fn axis_derivative(&self, s: usize, m: (f64, f64), prev: Option<usize>, next: Option<usize>) -> Option<(f64, f64)> {
        let proj = |n: Option<usize>| {
            n.filter(|&n| self.continuous(s, n))
                .and_then(|n| self.projected_px(n))
        };
        match (proj(prev), proj(next)) {
            (Some(a), Some(b)) => Some(((b.0 - a.0) * 0.5, (b.1 - a.1) * 0.5)),
            (None, Some(b)) => Some((b.0 - m.0, b.1 - m.1)),
            (Some(a), None) => Some((m.0 - a.0, m.1 - a.1)),
            (None, None) => None,
        }
    }

    /// A moved source with a 4-neighbor off its surface.
    fn on_silhouette(&self, s: usize) -> bool {
        let w = self.cam.width();
        let (x, y) = (s % w, s / w);
        [
            (x > 0).then(|| s - 1),
            (x + 1 < w).then(|| s + 1),
            (y > 0).then(|| s - w),
            (y + 1 < self.cam.height()).then(|| s + w),
        ]
        .into_iter()
        .any(|n| n.is_none_or(|n| !self.continuous(s, n)))
    }

    /// Local Jacobian of the source-to-target pixel map at a moved source.
    fn jacobian(&self, s: usize, m: (f64, f64)) -> Matrix2<f64> {
        let (w, h) = (self.cam.width(), self.cam.height());
        let (x, y) = (s % w, s / w);
        let left = (x > 0).then(|| s - 1);
        let right = (x + 1 < w).then(|| s + 1);
        let up = (y > 0).then(|| s - w);
        let down = (y + 1 < h).then(|| s + w);
        // perspective magnification as a fallback for isolated pixels
        let scale = self.depth.data()[s] as f64 / self.transformed.points()[s].z;
        let a = self.axis_derivative(s, m, left, right).unwrap_or((scale, 0.0));
        let b = self.axis_derivative(s, m, up, down).unwrap_or((0.0, scale));
        Matrix2::new(a.0, b.0, a.1, b.1)
    }

    /// All target splats of source pixel `s`.
    pub fn candidates(&self, s: usize) -> Vec<SplatCandidate> {
        let (w, h) = (self.cam.width(), self.cam.height());
        let (x, y) = (s % w, s / w);
        let distance = self.transformed.points()[s].norm();
        if !self.is_moved(s) {
            return vec![SplatCandidate {
                target: s,
                distance,
                source_pos: (x as f64, y as f64),
            }];
        }
        let Some(m) = self.projected_px(s) else {
            return Vec::new();
        };
        let jac = self.jacobian(s, m);
        let inv = jac.try_inverse().filter(|_| jac.determinant().abs() > 1e-9);
        let (hx, hy) = match self.footprint {
            SplatFootprint::Nearest => (0.5, 0.5),
            SplatFootprint::Adaptive => {
                let pad = if self.on_silhouette(s) { SILHOUETTE_PAD } else { 0.0 };
                (
                    (0.5 * (jac[(0, 0)].abs() + jac[(0, 1)].abs()) + pad).clamp(0.5, MAX_FOOTPRINT_HALF_WIDTH),
                    (0.5 * (jac[(1, 0)].abs() + jac[(1, 1)].abs()) + pad).clamp(0.5, MAX_FOOTPRINT_HALF_WIDTH),
                )
            }
        };
        let nearest = (m.0.round(), m.1.round());
        let mut out = Vec::new();
        let x_lo = (m.0 - hx).ceil().max(0.0);
        let x_hi = (m.0 + hx).floor().min(w as f64 - 1.0);
        let y_lo = (m.1 - hy).ceil().max(0.0);
        let y_hi = (m.1 + hy).floor().min(h as f64 - 1.0);
        let mut ty = y_lo;
        while ty <= y_hi {
            let mut tx = x_lo;
            while tx <= x_hi {
                let inside = (tx - m.0).abs() < hx && (ty - m.1).abs() < hy;
                if inside || (tx, ty) == nearest {
                    let source_pos = refine(inv.as_ref(), (x as f64, y as f64), (tx - m.0, ty - m.1), w, h);
                    out.push(SplatCandidate {
                        target: ty as usize * w + tx as usize,
                        distance,
                        source_pos,
                    });
                }
                tx += 1.0;
            }
            ty += 1.0;
        }
        out
    }
}

fn refine(inv: Option<&Matrix2<f64>>, src: (f64, f64), delta: (f64, f64), w: usize, h: usize) -> (f64, f64) {
    let (mut sx, mut sy) = src;
    if let Some(inv) = inv {
        let d = inv * nalgebra::Vector2::new(delta.0, delta.1);
        if d.x.abs() <= 1.0 && d.y.abs() <= 1.0 {
            sx += d.x;
            sy += d.y;
        }
    }
    (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64))
}

/// Build the 3D-aware flow for editing the masked object by `edit`.
pub fn build_flow(
    depth: &ScalarField,
    cam: &CameraIntrinsics,
    edit: &RigidTransform,
    object: &Mask,
    options: FlowOptions,
) -> Result<FlowBuild> {
    let splatter = Splatter::new(depth, cam, edit, object, options.footprint)?;
    let (w, h) = (depth.width(), depth.height());
    let n = w * h;

    let mut best: Vec<Option<(f64, usize, (f64, f64))>> = vec![None; n];
    let mut any_in_front = false;
    for s in 0..n {
        for c in splatter.candidates(s) {
            any_in_front = true;
            let slot = &mut best[c.target];
            let replace = match slot {
                None => true,
                Some((d, _, _)) => c.distance < *d - ZBUFFER_TIE_TOLERANCE,
            };
            if replace {
                *slot = Some((c.distance, s, c.source_pos));
            }
        }
    }
    if !any_in_front {
        return Err(Error::AllBehindCamera);
    }

    let mut du = vec![0.0f32; n];
    let mut dv = vec![0.0f32; n];
    let mut valid = Mask::filled(w, h, false);
    let mut winners = vec![None; n];
    for (t, slot) in best.iter().enumerate() {
        if let Some((_, s, (sx, sy))) = *slot {
            let (tx, ty) = ((t % w) as f64, (t / w) as f64);
            du[t] = ((tx - sx) / w as f64) as f32;
            dv[t] = ((ty - sy) / h as f64) as f32;
            valid.set(t % w, t / w, true);
            winners[t] = Some(s);
        }
    }
    if options.erosion_radius > 0 {
        valid = valid.erode(options.erosion_radius);
        for (t, win) in winners.iter_mut().enumerate() {
            if !valid.at(t) {
                *win = None;
            }
        }
    }
    Ok(FlowBuild {
        flow: FlowField::new(w, h, du, dv, valid)?,
        transformed: splatter.transformed,
        winners,
    })
}

/// `W[X, F](u) = X(u - F(u))` on valid pixels, zero elsewhere.
pub fn warp(signal: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    let (c, w, h) = signal.shape();
    if w != flow.width || h != flow.height {
        return Err(Error::ShapeMismatch(format!(
            "signal {}x{} vs flow {}x{}",
            w, h, flow.width, flow.height
        )));
    }
    let mut out = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        let plane = signal.plane(ch);
        for y in 0..h {
            for x in 0..w {
                if flow.valid.get(x, y) {
                    let (sx, sy) = flow.source_pixel(x, y);
                    out.push(sample_plane(plane, w, h, sx, sy));
                } else {
                    out.push(0.0);
                }
            }
        }
    }
    FeatureMap::new(c, w, h, out)
}

/// Warp a binary mask and re-binarize at 0.5.
pub fn warp_mask(mask: &Mask, flow: &FlowField) -> Result<Mask> {
    let warped = warp(&mask.to_field().to_feature_map(), flow)?.to_scalar_field()?;
    Ok(Mask::threshold(&warped, 0.5))
}

/// Resample a flow to another resolution. Displacements are interpolated
/// bilinearly; any hole marks every coarse pixel that covers it invalid.
pub fn resample_flow(flow: &FlowField, out_w: usize, out_h: usize) -> Result<FlowField> {
    if out_w == flow.width && out_h == flow.height {
        return Ok(flow.clone());
    }
    let mut uv = flow.du.clone();
    uv.extend_from_slice(&flow.dv);
    let uv = resample_bilinear(&FeatureMap::new(2, flow.width, flow.height, uv)?, out_w, out_h)?;
    let holes = resample_mask(&flow.valid.not(), out_w, out_h, MaskResample::Conservative)?;
    FlowField::new(out_w, out_h, uv.plane(0).to_vec(), uv.plane(1).to_vec(), holes.not())
}

/// Camera distance of a point; the z-buffer ordering key.
pub fn camera_distance(p: &Vec3) -> f64 {
    p.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(55.0, w, h).unwrap()
    }

    #[test]
    fn identity_edit_gives_exact_zero_flow() {
        let d = ScalarField::from_fn(16, 12, |x, y| 1.0 + 0.3 * ((x * 7 + y * 3) % 5) as f32).unwrap();
        let mask = Mask::from_fn(16, 12, |x, y| x > 4 && y < 7);
        for footprint in [SplatFootprint::Nearest, SplatFootprint::Adaptive] {
            let b = build_flow(&d, &cam(16, 12), &RigidTransform::identity(), &mask, FlowOptions { footprint, erosion_radius: 0 }).unwrap();
            assert!(b.flow.is_zero());
            assert_eq!(b.flow.valid().count(), 16 * 12);
        }
    }

    #[test]
    fn lateral_translation_of_plane() {
        // plane at z = 4, shifted by exactly k pixels
        let (w, h, k) = (32usize, 32usize, 3.0);
        let c = cam(w, h);
        let z = 4.0;
        let tx = k / w as f64 * 2.0 * c.tan_half_h() * z;
        let d = ScalarField::filled(w, h, z as f32);
        let mask = Mask::from_fn(w, h, |x, y| (8..20).contains(&x) && (10..22).contains(&y));
        let edit = RigidTransform::translation(Vec3::new(tx, 0.0, 0.0));
        let b = build_flow(&d, &c, &edit, &mask, FlowOptions::default()).unwrap();
        for y in 10..22 {
            for x in 11..23 {
                let i = y * w + x;
                assert!(b.flow.valid().at(i));
                assert!((b.flow.du()[i] as f64 - k / w as f64).abs() < 1e-6, "du at ({x},{y}) = {}", b.flow.du()[i]);
                assert!(b.flow.dv()[i].abs() < 1e-6);
            }
        }
        // the region uncovered on the left is a hole: every source there moved away
        for y in 10..22 {
            for x in 8..11 {
                assert!(!b.flow.valid().get(x, y));
            }
        }
    }

    #[test]
    fn closer_object_wins_over_background() {
        let (w, h) = (16usize, 16usize);
        let d = ScalarField::from_fn(w, h, |x, y| if (4..8).contains(&x) && (4..8).contains(&y) { 3.0 } else { 6.0 }).unwrap();
        let mask = Mask::from_fn(w, h, |x, y| (4..8).contains(&x) && (4..8).contains(&y));
        let c = cam(w, h);
        // move toward the camera and to the right
        let edit = RigidTransform::translation(Vec3::new(0.4, 0.0, -0.5));
        let b = build_flow(&d, &c, &edit, &mask, FlowOptions { footprint: SplatFootprint::Nearest, erosion_radius: 0 }).unwrap();
        let mut contested = 0;
        for t in 0..w * h {
            if let Some(s) = b.winners[t] {
                if mask.at(s) && !mask.at(t) {
                    contested += 1;
                    assert!(b.transformed.points()[s].norm() < b.transformed.points()[t].norm());
                }
            }
        }
        assert!(contested > 0);
    }

    #[test]
    fn all_behind_camera_is_error() {
        let d = ScalarField::filled(4, 4, 1.0);
        let edit = RigidTransform::translation(Vec3::new(0.0, 0.0, -5.0));
        let err = build_flow(&d, &cam(4, 4), &edit, &Mask::filled(4, 4, true), FlowOptions::default());
        assert!(matches!(err, Err(Error::AllBehindCamera)));
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let x = FeatureMap::from_fn(3, 7, 5, |c, x, y| (c * 13 + x * 3 + y) as f32 * 0.37).unwrap();
        assert_eq!(warp(&x, &FlowField::zero(7, 5)).unwrap(), x);
    }

    #[test]
    fn constant_signal_any_flow() {
        let x = FeatureMap::from_fn(2, 9, 9, |_, _, _| 2.5).unwrap();
        let f = FlowField::constant(9, 9, 0.13, -0.07);
        let out = warp(&x, &f).unwrap();
        for c in 0..2 {
            for (i, &v) in out.plane(c).iter().enumerate() {
                assert_eq!(v, if f.valid().at(i) { 2.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn impulse_moves_one_pixel() {
        let mut data = vec![0.0f32; 64];
        data[3 * 8 + 3] = 1.0;
        let x = FeatureMap::new(1, 8, 8, data).unwrap();
        let out = warp(&x, &FlowField::constant(8, 8, 1.0 / 8.0, 0.0)).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            assert_eq!(v, if i == 3 * 8 + 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn warp_resolution_mismatch() {
        let x = FeatureMap::zeros(1, 4, 4);
        assert!(warp(&x, &FlowField::zero(5, 4)).is_err());
    }

    #[test]
    fn resample_flow_cases() {
        let z = resample_flow(&FlowField::zero(10, 6), 5, 3).unwrap();
        assert!(z.is_zero() && z.valid().count() == 15);

        let c = FlowField::new(8, 8, vec![0.25; 64], vec![-0.125; 64], Mask::filled(8, 8, true)).unwrap();
        let r = resample_flow(&c, 3, 5).unwrap();
        assert!(r.du().iter().all(|&v| v == 0.25) && r.dv().iter().all(|&v| v == -0.125));

        let mut valid = Mask::filled(64, 64, true);
        valid.set(21, 40, false);
        let f = FlowField::new(64, 64, vec![0.0; 4096], vec![0.0; 4096], valid).unwrap();
        let r = resample_flow(&f, 32, 32).unwrap();
        assert_eq!(r.valid().count(), 32 * 32 - 1);
        assert!(!r.valid().get(10, 20));
    }

    #[test]
    fn flow_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FlowField::constant(6, 4, 0.25, 0.125);
        f.write(dir.path().join("flow")).unwrap();
        assert_eq!(FlowField::read(dir.path().join("flow")).unwrap(), f);
    }
}
