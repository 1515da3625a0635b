//! Synthetic benchmark scenes: one primitive on a ground plane in front of a
//! backdrop wall, rendered analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{build_flow, FlowOptions};
use crate::geometry::{CameraIntrinsics, EditSpec, Pivot, RigidTransform, Vec3};
use crate::raster::{FeatureMap, Mask, ScalarField};

const AMBIENT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Primitive {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
    /// Axis along the local `y` direction.
    Cylinder { radius: f64, half_height: f64 },
}

impl Primitive {
    /// Distance from the center to the lowest point when upright.
    pub fn base_offset(&self) -> f64 {
        match *self {
            Primitive::Box { half_extents } => half_extents[1],
            Primitive::Sphere { radius } => radius,
            Primitive::Cylinder { half_height, .. } => half_height,
        }
    }

    /// Corners of the local bounding box.
    fn bounds(&self) -> [f64; 3] {
        match *self {
            Primitive::Box { half_extents } => half_extents,
            Primitive::Sphere { radius } => [radius; 3],
            Primitive::Cylinder { radius, half_height } => [radius, half_height, radius],
        }
    }

    /// `max_p <p, d>` over the primitive in local coordinates.
    fn support(&self, d: &Vec3) -> f64 {
        match *self {
            Primitive::Box { half_extents: h } => h[0] * d.x.abs() + h[1] * d.y.abs() + h[2] * d.z.abs(),
            Primitive::Sphere { radius } => radius * d.norm(),
            Primitive::Cylinder { radius, half_height } => {
                half_height * d.y.abs() + radius * (d.x * d.x + d.z * d.z).sqrt()
            }
        }
    }

    /// Nearest hit of a local-frame ray: parameter and outward normal.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { radius } => {
                let a = d.dot(d);
                let b = o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 0.0).then(|| (t, (o + d * t) / radius))
            }
            Primitive::Box { half_extents: h } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > h[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-h[i] - o[i]) / d[i], (h[i] - o[i]) / d[i]);
                    let mut s = -1.0;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        s = 1.0;
                    }
                    if a > t0 {
                        t0 = a;
                        axis = i;
                        sign = s;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[axis] = sign;
                Some((t0, n))
            }
            Primitive::Cylinder { radius, half_height } => {
                let mut best: Option<(f64, Vec3)> = None;
                let a = d.x * d.x + d.z * d.z;
                if a > 1e-15 {
                    let b = o.x * d.x + o.z * d.z;
                    let c = o.x * o.x + o.z * o.z - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let y = o.y + t * d.y;
                        if t > 0.0 && y.abs() <= half_height {
                            let p = o + d * t;
                            best = Some((t, Vec3::new(p.x, 0.0, p.z) / radius));
                        }
                    }
                }
                if d.y.abs() > 1e-15 {
                    for cap in [-half_height, half_height] {
                        let t = (cap - o.y) / d.y;
                        let p = o + d * t;
                        if t > 0.0 && p.x * p.x + p.z * p.z <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, Vec3::new(0.0, cap.signum(), 0.0)));
                        }
                    }
                }
                best
            }
        }
    }
}

/// Camera rig: intrinsics plus a pose above the ground looking along world `+z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rig {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Camera height above the ground.
    pub elevation: f64,
    /// Negative values look down.
    pub pitch_deg: f64,
}

impl Default for Rig {
    fn default() -> Self {
        Self {
            fov_deg: CameraIntrinsics::DEFAULT_FOV_DEG,
            width: 128,
            height: 128,
            elevation: 1.5,
            pitch_deg: -10.0,
        }
    }
}

impl Rig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fov_deg, self.width, self.height)
    }

    /// Camera-to-world transform.
    pub fn camera_to_world(&self) -> RigidTransform {
        RigidTransform::about_pivot(
            Vec3::x(),
            -self.pitch_deg,
            Vec3::new(0.0, self.elevation, 0.0),
            Vec3::zeros(),
        )
        .expect("x axis is nonzero")
    }
}

/// A primitive placed in the world, with lighting and colors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub primitive: Primitive,
    /// World position of the primitive's center.
    pub center: [f64; 3],
    /// Rotation about the world vertical axis.
    pub yaw_deg: f64,
    pub rig: Rig,
    /// Unit vector pointing towards the light.
    pub light: [f64; 3],
    pub albedo: [f64; 3],
    pub ground_albedo: [f64; 3],
    pub wall_albedo: [f64; 3],
    /// World `z` of the backdrop wall.
    pub wall_z: f64,
}

impl Scene {
    /// Scene with the primitive resting on the ground at `(x, z)`.
    pub fn on_ground(primitive: Primitive, x: f64, z: f64, yaw_deg: f64) -> Self {
        Self {
            primitive,
            center: [x, primitive.base_offset(), z],
            yaw_deg,
            rig: Rig::default(),
            light: normalized([-0.4, 0.8, -0.45]),
            albedo: [0.8, 0.3, 0.25],
            ground_albedo: [0.45, 0.5, 0.4],
            wall_albedo: [0.6, 0.65, 0.75],
            wall_z: 12.0,
        }
    }

    /// Object-to-world transform.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_axis_angle(Vec3::y(), self.yaw_deg, Vec3::from(self.center)).expect("y axis is nonzero")
    }

    /// Center of the primitive in camera coordinates.
    pub fn center_in_camera(&self) -> Vec3 {
        self.rig.camera_to_world().inverse().apply(&Vec3::from(self.center))
    }

    /// Camera-space edit expressed as a world-space transform.
    pub fn edit_in_world(&self, edit: &RigidTransform) -> RigidTransform {
        let c2w = self.rig.camera_to_world();
        c2w.compose(edit).compose(&c2w.inverse())
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    Vec3::from(v).normalize().into()
}

/// Depth, shaded image and object mask of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub depth: ScalarField,
    /// RGB in `[0, 1]`.
    pub image: FeatureMap,
    pub mask: Mask,
}

fn shade(albedo: [f64; 3], n: &Vec3, light: &Vec3) -> [f64; 3] {
    let k = n.dot(light).max(0.0) + AMBIENT;
    albedo.map(|a| (a * k).min(1.0))
}

fn render_pose(scene: &Scene, pose: &RigidTransform) -> Result<Render> {
    let rig = scene.rig;
    let cam = rig.intrinsics()?;
    let c2w = rig.camera_to_world();
    let origin = c2w.translation;
    let inv = pose.inverse();
    let light = Vec3::from(scene.light).normalize();
    let (w, h) = (rig.width, rig.height);
    let rows: Vec<Vec<(f32, [f64; 3], bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dc = cam.ray_direction(cam.pixel_center(x, y));
                    let dw = c2w.rotation * dc;
                    // dc.z == 1, so the ray parameter is the camera-space z
                    let mut t_bg = f64::INFINITY;
                    let mut n_bg = Vec3::zeros();
                    let mut albedo = scene.wall_albedo;
                    if dw.z > 0.0 {
                        t_bg = (scene.wall_z - origin.z) / dw.z;
                        n_bg = -Vec3::z();
                    }
                    if dw.y < 0.0 {
                        let t = -origin.y / dw.y;
                        if t < t_bg {
                            t_bg = t;
                            n_bg = Vec3::y();
                            albedo = scene.ground_albedo;
                        }
                    }
                    let ol = inv.apply(&origin);
                    let dl = inv.rotation * dw;
                    match scene.primitive.intersect(&ol, &dl) {
                        Some((t, nl)) if t < t_bg => {
                            let n = pose.rotation * nl;
                            (t as f32, shade(scene.albedo, &n, &light), true)
                        }
                        _ => (t_bg as f32, shade(albedo, &n_bg, &light), false),
                    }
                })
                .collect()
        })
        .collect();
    let px: Vec<_> = rows.into_iter().flatten().collect();
    let depth = ScalarField::new(w, h, px.iter().map(|p| p.0).collect())?;
    let mask = Mask::new(w, h, px.iter().map(|p| p.2 as u8).collect())?;
    let mut rgb = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        rgb.extend(px.iter().map(|p| p.1[c] as f32));
    }
    Ok(Render {
        depth,
        image: FeatureMap::new(3, w, h, rgb)?,
        mask,
    })
}

pub fn render(scene: &Scene) -> Result<Render> {
    render_pose(scene, &scene.pose())
}

/// Renders the scene with the primitive moved by a camera-space edit.
pub fn render_edited(scene: &Scene, edit: &RigidTransform) -> Result<Render> {
    render_pose(scene, &scene.edit_in_world(edit).compose(&scene.pose()))
}

/// Lowest world `y` of the primitive under `pose`.
pub fn lowest_point(primitive: &Primitive, pose: &RigidTransform) -> f64 {
    let down = pose.rotation.transpose() * Vec3::new(0.0, -1.0, 0.0);
    pose.translation.y - primitive.support(&down)
}

/// True when the primitive's bounding box projects inside the frame with
/// `margin` (normalized units) to spare and lies in front of the camera.
pub fn inside_frustum(scene: &Scene, pose: &RigidTransform, margin: f64) -> Result<bool> {
    let cam = scene.rig.intrinsics()?;
    let w2c = scene.rig.camera_to_world().inverse();
    let b = scene.primitive.bounds();
    for i in 0..8 {
        let corner = Vec3::new(
            if i & 1 == 0 { -b[0] } else { b[0] },
            if i & 2 == 0 { -b[1] } else { b[1] },
            if i & 4 == 0 { -b[2] } else { b[2] },
        );
        let p = cam.project_point(&w2c.apply(&pose.apply(&corner)));
        if !p.in_front || p.u.iter().any(|&u| u < margin || u > 1.0 - margin) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Share of the object's pixels left without a source after the edit.
pub fn disocclusion_fraction(render: &Render, scene: &Scene, edit: &RigidTransform) -> Result<f64> {
    let cam = scene.rig.intrinsics()?;
    let build = build_flow(&render.depth, &cam, edit, &render.mask, FlowOptions::default())?;
    let total = render.mask.count();
    if total == 0 {
        return Ok(0.0);
    }
    let holes = render.mask.and(&build.flow.valid().not())?.count();
    Ok(holes as f64 / total as f64)
}

/// Sampling ranges of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub rig: Rig,
    /// Disocclusion threshold δ.
    pub delta: f64,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Largest tilt of the rotation axis away from vertical.
    pub max_axis_tilt_deg: f64,
    /// Frame margin for the frustum check, normalized units.
    pub margin: f64,
    /// Smallest accepted object area in pixels.
    pub min_object_pixels: usize,
    /// Rejection attempts allowed per requested sample.
    pub attempts_per_sample: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            rig: Rig::default(),
            delta: 0.3,
            max_translation: 1.5,
            max_rotation_deg: 45.0,
            max_axis_tilt_deg: 10.0,
            margin: 0.05,
            min_object_pixels: 100,
            attempts_per_sample: 200,
        }
    }
}

/// One accepted benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSample {
    pub scene: Scene,
    /// Camera-space edit with an explicit pivot.
    pub edit: EditSpec,
    pub disocclusion_fraction: f64,
}

impl EditSample {
    pub fn transform(&self) -> Result<RigidTransform> {
        self.edit.resolve(None)
    }
}

fn sample_scene(rng: &mut ChaCha8Rng, rig: Rig, kind: usize) -> Scene {
    let primitive = match kind {
        0 => Primitive::Box {
            half_extents: [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
            ],
        },
        1 => Primitive::Sphere {
            radius: rng.random_range(0.35..0.75),
        },
        _ => Primitive::Cylinder {
            radius: rng.random_range(0.25..0.5),
            half_height: rng.random_range(0.3..0.8),
        },
    };
    let mut scene = Scene::on_ground(
        primitive,
        rng.random_range(-1.0..1.0),
        rng.random_range(4.0..7.0),
        rng.random_range(0.0..360.0),
    );
    scene.rig = rig;
    scene.albedo = [
        rng.random_range(0.3..0.9),
        rng.random_range(0.3..0.9),
        rng.random_range(0.3..0.9),
    ];
    scene
}

fn sample_edit(rng: &mut ChaCha8Rng, scene: &Scene, cfg: &BenchmarkConfig, translate: bool) -> EditSpec {
    let w2c = scene.rig.camera_to_world().inverse();
    let pivot = Pivot::Point(scene.center_in_camera().into());
    if translate {
        let t = loop {
            let t = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..0.5),
                rng.random_range(-1.0..1.0),
            ) * cfg.max_translation;
            if t.norm() <= cfg.max_translation && t.norm() > 0.1 {
                break t;
            }
        };
        EditSpec {
            axis: [0.0, 1.0, 0.0],
            angle_deg: 0.0,
            translation: (w2c.rotation * t).into(),
            pivot,
        }
    } else {
        let tilt = rng.random_range(0.0..cfg.max_axis_tilt_deg).to_radians();
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let axis = Vec3::new(tilt.sin() * az.cos(), tilt.cos(), tilt.sin() * az.sin());
        let mag = rng.random_range(10.0_f64.min(cfg.max_rotation_deg)..=cfg.max_rotation_deg);
        let angle = if rng.random_bool(0.5) { mag } else { -mag };
        let mut edit = EditSpec {
            axis: (w2c.rotation * axis).into(),
            angle_deg: angle,
            translation: [0.0; 3],
            pivot,
        };
        // a tilted axis pushes a flat base into the ground; lift it back to rest
        if let Ok(t) = edit.resolve(None) {
            let low = lowest_point(&scene.primitive, &scene.edit_in_world(&t).compose(&scene.pose()));
            if low < 0.0 {
                edit.translation = (w2c.rotation * Vec3::new(0.0, -low, 0.0)).into();
            }
        }
        edit
    }
}

/// Checks an edit against the benchmark constraints; returns the
/// disocclusion fraction when all hold.
pub fn check_edit(scene: &Scene, edit: &RigidTransform, cfg: &BenchmarkConfig) -> Result<Option<f64>> {
    let pose = scene.pose();
    if !inside_frustum(scene, &pose, cfg.margin)? {
        return Ok(None);
    }
    let moved = scene.edit_in_world(edit).compose(&pose);
    if !inside_frustum(scene, &moved, cfg.margin)? || lowest_point(&scene.primitive, &moved) < -1e-6 {
        return Ok(None);
    }
    let r = render(scene)?;
    if r.mask.count() < cfg.min_object_pixels {
        return Ok(None);
    }
    let frac = disocclusion_fraction(&r, scene, edit)?;
    Ok((frac <= cfg.delta).then_some(frac))
}

/// Rejection-samples `n` scene and edit pairs; deterministic per `seed`.
///
/// Sample `i` is drawn from a fixed stratum: translations and rotations
/// alternate, and the primitive type cycles every two samples, so easy
/// combinations cannot crowd out the others.
pub fn sample_benchmark(n: usize, seed: u64, cfg: &BenchmarkConfig) -> Result<Vec<EditSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = n * cfg.attempts_per_sample;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        if attempts == budget {
            return Err(Error::RejectionBudget {
                attempts,
                accepted: out.len(),
            });
        }
        attempts += 1;
        let i = out.len();
        let scene = sample_scene(&mut rng, cfg.rig, (i / 2) % 3);
        let edit = sample_edit(&mut rng, &scene, cfg, i % 2 == 0);
        if let Some(frac) = check_edit(&scene, &edit.resolve(None)?, cfg)? {
            out.push(EditSample {
                scene,
                edit,
                disocclusion_fraction: frac,
            });
        }
    }
    log::debug!("benchmark: {} samples from {} attempts", n, attempts);
    Ok(out)
}
