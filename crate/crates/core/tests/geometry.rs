mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use rad_core::geometry::{
    backproject, make_context_3d, render, sample_pose, CameraIntrinsics, Pose, PoseBounds, RenderConfig,
};
use rad_core::SeededRng;
use rand::Rng;

fn camera(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap()
}

#[test]
fn render_matches_brute_force_zbuffer() {
    let (w, h) = (24, 18);
    let k = camera(w, h);
    for seed in 0..100 {
        let mut rng = SeededRng::new(seed);
        let cloud = common::random_cloud(rng.gen_range(1..300), &mut rng);
        let pose = sample_pose(&mut rng, &PoseBounds { max_angle_deg: 20.0, max_translation_m: 0.2 });
        let r = render(&cloud, &k, &pose, (h, w), &RenderConfig::default()).unwrap();
        let oracle = common::brute_force_zbuffer(&cloud, &k, &pose, w, h);
        for v in 0..h {
            for u in 0..w {
                assert_eq!(r.depth.get(u, v), oracle[v * w + u], "seed {seed} pixel ({u}, {v})");
            }
        }
    }
}

#[test]
fn winner_colour_is_carried_to_the_image() {
    let k = camera(8, 8);
    let mut rng = SeededRng::new(3);
    let cloud = common::random_cloud(200, &mut rng);
    let r = render(&cloud, &k, &Pose::identity(), (8, 8), &RenderConfig::default()).unwrap();
    for v in 0..8 {
        for u in 0..8 {
            match r.winner[v * 8 + u] {
                Some(i) => assert_eq!(r.image.get(u, v), cloud.colors[i]),
                None => assert_eq!(r.depth.get(u, v), None),
            }
        }
    }
}

#[test]
fn analytic_correspondences_reproject() {
    let (w, h) = (40, 30);
    let k = camera(w, h);
    for seed in 0..20 {
        let mut rng = SeededRng::new(seed);
        let (img, depth) = common::random_rgbd(w, h, &mut rng);
        let pose = sample_pose(&mut rng, &PoseBounds::for_median_depth(depth.median().unwrap()));
        let aug = make_context_3d(&img, &depth, &k, &pose, 7, &RenderConfig::default()).unwrap();
        assert!(!aug.correspondences.is_empty());
        assert!(aug.correspondences.first_violation().is_none());
        let (px, m) = common::reprojection_error(&depth, &k, &pose, &aug);
        assert!(px <= 0.5, "seed {seed}: {px} px");
        assert!(m <= 1e-6, "seed {seed}: {m} m");
    }
}

#[test]
fn pure_translation_shifts_a_fronto_parallel_plane() {
    let (w, h) = (16, 16);
    let k = camera(w, h);
    let img = rad_core::ImageBuffer::from_fn(w, h, |u, _| [u as f64 / 16.0, 0.0, 0.0]);
    let depth = rad_core::DepthMap::from_fn(w, h, |_, _| Some(2.0));
    // One pixel at depth 2 with fx = 16 is 0.125 m.
    let pose = Pose::translation_only([0.125, 0.0, 0.0]);
    let aug = make_context_3d(&img, &depth, &k, &pose, 0, &RenderConfig::default()).unwrap();
    for m in &aug.correspondences.pairs {
        assert_eq!(m.ub, m.ua + 1.0);
        assert_eq!(m.vb, m.va);
    }
    assert_eq!(aug.correspondences.len(), (w - 1) * h);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identity_round_trip(seed in 0u64..100_000) {
        let mut rng = SeededRng::new(seed);
        let (w, h) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let k = camera(w, h);
        let (img, depth) = common::random_rgbd(w, h, &mut rng);
        let r = render(&backproject(&img, &depth, &k).unwrap(), &k, &Pose::identity(), (h, w), &RenderConfig::default()).unwrap();
        for v in 0..h {
            for u in 0..w {
                match (depth.get(u, v), r.depth.get(u, v)) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9),
                    (None, None) => {}
                    other => prop_assert!(false, "validity differs at ({}, {}): {:?}", u, v, other),
                }
            }
        }
    }

    #[test]
    fn rendered_depth_is_positive(seed in 0u64..100_000) {
        let mut rng = SeededRng::new(seed);
        let cloud = common::random_cloud(100, &mut rng);
        let k = camera(12, 12);
        let pose = sample_pose(&mut rng, &PoseBounds { max_angle_deg: 30.0, max_translation_m: 0.5 });
        let r = render(&cloud, &k, &pose, (12, 12), &RenderConfig { splat_px: 3 }).unwrap();
        prop_assert!(r.depth.values().iter().zip(r.depth.valid_mask()).all(|(&d, &ok)| !ok || (d > 0.0 && d.is_finite())));
    }

    #[test]
    fn sampled_poses_respect_bounds(seed in 0u64..100_000, angle in 0.0f64..45.0, t in 0.0f64..1.0) {
        let pose = sample_pose(&mut SeededRng::new(seed), &PoseBounds { max_angle_deg: angle, max_translation_m: t });
        prop_assert!(pose.angle().to_degrees() <= angle + 1e-9);
        prop_assert!(pose.translation.iter().all(|x| x.abs() <= t));
        prop_assert!(Pose::new(pose.rotation, pose.translation).is_ok());
    }

    #[test]
    fn unproject_then_project_is_identity(u in 0.0f64..100.0, v in 0.0f64..100.0, d in 0.01f64..50.0) {
        let k = CameraIntrinsics::new(80.0, 90.0, 50.0, 40.0).unwrap();
        let (pu, pv) = k.project(&k.unproject(u, v, d));
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }
}

#[test]
fn improper_rotation_is_rejected() {
    let reflect = nalgebra::Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    assert!(Pose::new(reflect, Vector3::zeros()).is_err());
}
