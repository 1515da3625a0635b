use handles_core::depth_edit::{background_depth, edit_depth, DepthConvention, DepthEditOptions};
use handles_core::poisson::DEFAULT_TOLERANCE;
use handles_core::geometry::{CameraIntrinsics, EditSpec, Pivot, Vec3};
use handles_core::metrics::iou;
use handles_core::scenes::{render, render_edited, Primitive, Scene};
use handles_core::{Mask, ScalarField};
use proptest::prelude::*;

fn floating_box() -> Scene {
    let mut s = Scene::on_ground(Primitive::Box { half_extents: [0.4, 0.3, 0.35] }, -0.3, 5.0, 30.0);
    s.center[1] += 0.4;
    s
}

fn empty(scene: &Scene) -> Scene {
    let mut e = *scene;
    e.center = [200.0, 0.5, 5.0];
    e
}

#[test]
fn translated_floating_box_matches_rerender() {
    let scene = floating_box();
    let cam = scene.rig.intrinsics().unwrap();
    let r = render(&scene).unwrap();
    let bg = render(&empty(&scene)).unwrap().depth;
    let c = scene.center_in_camera();
    // shift the center right by 8 pixels at its own depth
    let k = 8.0;
    let dx = k * 2.0 * cam.tan_half_h() * c.z / cam.width() as f64;
    let edit = EditSpec {
        axis: [0.0, 1.0, 0.0],
        angle_deg: 0.0,
        translation: [dx, 0.0, 0.0],
        pivot: Pivot::Point(c.into()),
    };
    let gt = render_edited(&scene, &edit.resolve(None).unwrap()).unwrap();
    // a one-pixel band around the true silhouette, where point-sampled masks
    // cannot agree under a sub-pixel shift
    let rim = gt.mask.dilate(1).and(&gt.mask.erode(1).not()).unwrap();
    {
        let out = edit_depth(&r.depth, &cam, &edit, &r.mask, Some(&bg), &DepthEditOptions::default()).unwrap();
        let mut worst = 0.0f64;
        let mut rim_misses = 0;
        for i in 0..r.depth.data().len() {
            if !out.valid_mask.at(i) {
                continue;
            }
            let (a, b) = (out.edited_depth.data()[i] as f64, gt.depth.data()[i] as f64);
            let err = (a - b).abs() / b;
            if rim.at(i) {
                rim_misses += (err >= 1e-2) as usize;
            } else {
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-2, "worst relative error {}", worst);
        assert!(
            (rim_misses as f64) < 0.02 * gt.mask.count() as f64,
            "{} rim pixels off for {} object pixels",
            rim_misses,
            gt.mask.count()
        );
        assert!(iou(&out.warped_object_mask, &gt.mask).unwrap() > 0.9);
    }
}

#[test]
fn rotated_box_mask_matches_rerender() {
    let scene = Scene::on_ground(Primitive::Box { half_extents: [0.5, 0.5, 0.5] }, 0.0, 5.0, 35.0);
    let cam = scene.rig.intrinsics().unwrap();
    let r = render(&scene).unwrap();
    let up = scene.rig.camera_to_world().inverse().rotation * Vec3::y();
    let edit = EditSpec {
        axis: up.into(),
        angle_deg: 20.0,
        translation: [0.0; 3],
        pivot: Pivot::Point(scene.center_in_camera().into()),
    };
    let gt = render_edited(&scene, &edit.resolve(None).unwrap()).unwrap();
    let out = edit_depth(&r.depth, &cam, &edit, &r.mask, None, &DepthEditOptions::default()).unwrap();
    let score = iou(&out.warped_object_mask, &gt.mask).unwrap();
    assert!(score >= 0.9, "IoU {}", score);
}

#[test]
fn infilled_background_restores_ramp() {
    let n = 48;
    let ramp = ScalarField::from_fn(n, n, |x, y| 3.0 + 0.12 * y as f32 + 0.01 * x as f32).unwrap();
    let object = Mask::from_fn(n, n, |x, y| (x as f64 - 20.0).hypot(y as f64 - 26.0) < 8.0);
    let depth = ScalarField::from_fn(n, n, |x, y| if object.get(x, y) { 2.0 } else { ramp.get(x, y) }).unwrap();
    let filled = background_depth(&depth, &object, None, DEFAULT_TOLERANCE).unwrap();
    for i in 0..n * n {
        let (a, b) = (filled.data()[i], ramp.data()[i]);
        assert!((a - b).abs() / b < 5e-3, "pixel {}: {} vs {}", i, a, b);
    }
    let given = ScalarField::filled(n, n, 7.0);
    assert_eq!(background_depth(&depth, &object, Some(&given), DEFAULT_TOLERANCE).unwrap(), given);
}

#[test]
fn background_far_from_object_is_untouched() {
    let scene = floating_box();
    let cam = scene.rig.intrinsics().unwrap();
    let r = render(&scene).unwrap();
    let edit = EditSpec {
        axis: [0.0, 1.0, 0.0],
        angle_deg: 15.0,
        translation: [0.2, 0.0, 0.3],
        pivot: Pivot::Centroid,
    };
    let out = edit_depth(&r.depth, &cam, &edit, &r.mask, None, &DepthEditOptions::default()).unwrap();
    let near = out.warped_object_mask.dilate(3).or(&out.object_footprint.dilate(3)).unwrap();
    for i in 0..r.depth.data().len() {
        if !near.at(i) {
            let (a, b) = (out.edited_depth.data()[i], out.background_depth.data()[i]);
            assert!((a - b).abs() <= 1e-5 * b, "pixel {}: {} vs {}", i, a, b);
        }
    }
}

fn plane_scene(n: usize, z: f32) -> (ScalarField, Mask) {
    let mask = Mask::from_fn(n, n, |x, y| (8..20).contains(&x) && (10..22).contains(&y));
    let depth = ScalarField::from_fn(n, n, |x, y| if mask.get(x, y) { z } else { 9.0 }).unwrap();
    (depth, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn z_translation_offsets_object_depth(delta in 0.05f64..2.0, z in 2.0f32..4.0) {
        let n = 32;
        let cam = CameraIntrinsics::new(55.0, n, n).unwrap();
        let (depth, mask) = plane_scene(n, z);
        let edit = EditSpec { axis: [0.0, 1.0, 0.0], angle_deg: 0.0, translation: [0.0, 0.0, delta], pivot: Pivot::Centroid };
        let out = edit_depth(&depth, &cam, &edit, &mask, None, &DepthEditOptions::default()).unwrap();
        prop_assert!(!out.warped_object_mask.is_empty());
        for i in 0..n * n {
            if out.warped_object_mask.at(i) {
                prop_assert!((out.object_depth.data()[i] as f64 - (z as f64 + delta)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn masks_partition_the_image(
        angle in -40.0f64..40.0,
        tx in -0.6f64..0.6,
        tz in -1.0f64..1.0,
        euclid in any::<bool>(),
    ) {
        let n = 32;
        let cam = CameraIntrinsics::new(55.0, n, n).unwrap();
        let (depth, mask) = plane_scene(n, 3.0);
        let edit = EditSpec { axis: [0.1, 1.0, 0.0], angle_deg: angle, translation: [tx, 0.0, tz], pivot: Pivot::Centroid };
        let options = DepthEditOptions {
            convention: if euclid { DepthConvention::Euclidean } else { DepthConvention::Z },
            ..Default::default()
        };
        let out = edit_depth(&depth, &cam, &edit, &mask, None, &options).unwrap();
        prop_assert!(out.warped_object_mask.and(&out.background_mask).unwrap().is_empty());
        prop_assert_eq!(out.warped_object_mask.or(&out.background_mask).unwrap().count(), n * n);
        prop_assert!(out.warped_object_mask.is_subset_of(&out.valid_mask));
        prop_assert!(out.warped_object_mask.is_subset_of(&out.object_footprint));
        prop_assert!(out.edited_depth.data().iter().all(|&d| d.is_finite() && d > 0.0));
    }
}
