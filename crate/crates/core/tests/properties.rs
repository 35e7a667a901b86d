use nalgebra::Vector3;
use proptest::prelude::*;
use splat4d::camera::{make_trajectory, pixel_ray, rpe, Camera, Pose, TrajectoryKind, TrajectoryParams};
use splat4d::datagen::{align_depth, AnchorSet};
use splat4d::fitter::StagePlan;
use splat4d::flowmatch::{guidance_gamma, GuidanceSchedule};
use splat4d::formats::{decode_g4d, encode_g4d, quantize_field, RawTensor};
use splat4d::gaussian::{deform, GaussianField, GaussianPrimitive, Quat};
use splat4d::losses::geometric_loss;
use splat4d::raster::render;
use splat4d::Image;

fn quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("quaternion too short", |q| q.iter().map(|v| v * v).sum::<f64>() > 0.04)
        .prop_map(|q| Quat(q).normalized().unwrap())
}

fn primitive() -> impl Strategy<Value = GaussianPrimitive> {
    (
        prop::array::uniform3(-0.6..0.6f64),
        2.0..4.0f64,
        prop::array::uniform3(-2.0..-0.8f64),
        quat(),
        -1.0..2.0f64,
        prop::array::uniform3(0.0..1.0f64),
    )
        .prop_map(|(xy, z, s, q, o, rgb)| GaussianPrimitive {
            mu: Vector3::new(xy[0], xy[1], z),
            log_scale: Vector3::from(s),
            quat: q,
            opacity_logit: o,
            color: rgb.to_vec(),
        })
}

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-1.0..1.0f64), -3.0..3.0f64, prop::array::uniform3(-5.0..5.0f64))
        .prop_filter("degenerate axis", |(a, _, _)| a.iter().map(|v| v * v).sum::<f64>() > 0.01)
        .prop_map(|(axis, angle, t)| {
            Pose::new(Quat::from_axis_angle(Vector3::from(axis), angle).to_rotation(), Vector3::from(t))
        })
}

fn cam16() -> Camera {
    Camera::new(16.0, 16.0, 8.0, 8.0, 16, 16, Pose::identity()).unwrap()
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn g4d_round_trip_is_exact_after_quantization(
        prims in prop::collection::vec(primitive(), 1..6),
        frames in 2usize..4,
    ) {
        let timestamps: Vec<f64> = (0..frames).map(|k| k as f64 / frames as f64).collect();
        let field = GaussianField::with_identity_tracks(prims, timestamps).unwrap();
        let q = quantize_field(&field).unwrap();
        let bytes = encode_g4d(&q).unwrap();
        prop_assert_eq!(decode_g4d(&bytes).unwrap(), q.clone());
        prop_assert_eq!(quantize_field(&q).unwrap(), q);
    }

    #[test]
    fn g4d_rejects_every_truncation(prims in prop::collection::vec(primitive(), 1..3), cut in 0.0..1.0f64) {
        let field = GaussianField::new_static(prims).unwrap();
        let bytes = encode_g4d(&field).unwrap();
        let len = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(decode_g4d(&bytes[..len]).is_err());
    }

    #[test]
    fn rawt_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
        let t = RawTensor::from_f64(&dims, &data).unwrap();
        let bytes = t.encode().unwrap();
        let (back, used) = RawTensor::decode(&bytes, 0).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&back, &t);
        for cut in 0..bytes.len() {
            prop_assert!(RawTensor::decode(&bytes[..cut], 0).is_err());
        }
    }

    #[test]
    fn align_depth_recovers_collinear_anchors(
        s in 0.1..10.0f64,
        t in -5.0..5.0f64,
        rel in prop::collection::vec(0.0..5.0f64, 2..20),
    ) {
        prop_assume!(rel.iter().any(|r| (r - rel[0]).abs() > 1e-3));
        let anchors = AnchorSet { pairs: rel.iter().map(|&r| (r, s * r + t)).collect() };
        let map = Image::from_vec(rel.len(), 1, 1, rel.clone()).unwrap();
        let (metric, s_hat, t_hat) = align_depth(&map, &anchors).unwrap();
        prop_assert!((s_hat - s).abs() <= 1e-8 * s.max(1.0));
        prop_assert!((t_hat - t).abs() <= 1e-8 * (1.0 + s + t.abs()));
        for (m, r) in metric.data.iter().zip(&rel) {
            prop_assert!((m - (s * r + t)).abs() <= 1e-8 * (1.0 + s * r + t.abs()));
        }
    }

    #[test]
    fn aligned_map_ignores_affine_changes_of_the_relative_depth(
        pairs in prop::collection::vec((0.0..5.0f64, 1.0..10.0f64), 3..12),
        a in 0.1..10.0f64,
        b in -5.0..5.0f64,
    ) {
        prop_assume!(pairs.iter().any(|p| (p.0 - pairs[0].0).abs() > 1e-2));
        let rel: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let map = Image::from_vec(rel.len(), 1, 1, rel.clone()).unwrap();
        let moved = Image::from_vec(rel.len(), 1, 1, rel.iter().map(|r| a * r + b).collect()).unwrap();
        let (m1, _, _) = align_depth(&map, &AnchorSet { pairs: pairs.clone() }).unwrap();
        let (m2, _, _) = align_depth(&moved, &AnchorSet {
            pairs: pairs.iter().map(|&(r, g)| (a * r + b, g)).collect(),
        }).unwrap();
        prop_assert!(max_abs_diff(&m1, &m2) <= 1e-8);
    }

    #[test]
    fn geometric_loss_is_affine_invariant(
        values in prop::collection::vec((0.5..5.0f64, 0.5..5.0f64), 4..32),
        a in 0.1..10.0f64,
        b in -3.0..3.0f64,
    ) {
        let n = values.len();
        let pred = Image::from_vec(n, 1, 1, values.iter().map(|v| v.0).collect()).unwrap();
        let gt = Image::from_vec(n, 1, 1, values.iter().map(|v| v.1).collect()).unwrap();
        let moved = Image::from_vec(n, 1, 1, pred.data.iter().map(|p| a * p + b).collect()).unwrap();
        let mask = vec![true; n];
        let l1 = geometric_loss(&pred, &gt, &mask).unwrap();
        let l2 = geometric_loss(&moved, &gt, &mask).unwrap();
        prop_assert!((0.0..=2.0).contains(&l1));
        prop_assert!((l1 - l2).abs() <= 1e-9);
    }

    #[test]
    fn identity_tracks_leave_the_canonical_set_unchanged(
        prims in prop::collection::vec(primitive(), 1..8),
        frames in 2usize..5,
    ) {
        let timestamps: Vec<f64> = (0..frames).map(|k| k as f64 / frames as f64).collect();
        let field = GaussianField::with_identity_tracks(prims.clone(), timestamps).unwrap();
        for k in 0..frames {
            prop_assert_eq!(&deform(&field, k).unwrap(), &prims);
        }
    }

    #[test]
    fn render_is_rigidly_equivariant(prims in prop::collection::vec(primitive(), 1..6), g in pose()) {
        let cam = Camera::look_at(Vector3::new(0.1, -0.2, -1.0), Vector3::new(0.0, 0.0, 3.0), 16, 16, 1.0).unwrap();
        let rot = Quat::from_rotation(&g.rotation);
        let moved: Vec<GaussianPrimitive> = prims
            .iter()
            .map(|p| GaussianPrimitive { mu: g.apply(&p.mu), quat: rot.hamilton(&p.quat).normalized().unwrap(), ..p.clone() })
            .collect();
        let a = render(&prims, &cam, [0.2; 3]).unwrap();
        let b = render(&moved, &cam.transformed(&g), [0.2; 3]).unwrap();
        prop_assert!(max_abs_diff(&a.color, &b.color) < 1e-6);
        prop_assert!(max_abs_diff(&a.depth, &b.depth) < 1e-6);
        prop_assert!(max_abs_diff(&a.alpha, &b.alpha) < 1e-6);
    }

    #[test]
    fn rendered_alpha_stays_in_unit_interval(prims in prop::collection::vec(primitive(), 0..8)) {
        let out = render(&prims, &cam16(), [0.0; 3]).unwrap();
        prop_assert!(out.alpha.data.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn pixel_rays_project_back(g in pose(), u in 0.0..16.0f64, v in 0.0..16.0f64, depth in 0.1..20.0f64) {
        let cam = Camera::new(16.0, 18.0, 7.5, 8.5, 16, 16, g).unwrap();
        let (origin, dir) = pixel_ray(&cam, u, v).unwrap();
        prop_assert!((dir.norm() - 1.0).abs() < 1e-12);
        let (pu, pv, z) = cam.project(&(origin + depth * dir));
        prop_assert!(z > 0.0);
        prop_assert!((pu - u).abs() < 1e-8 && (pv - v).abs() < 1e-8);
    }

    #[test]
    fn pose_inverse_composes_to_identity(g in pose()) {
        let id = g.compose(&g.inverse());
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!(id.translation.norm() < 1e-12);
        prop_assert!(g.is_rigid(1e-9));
    }

    #[test]
    fn rpe_of_a_trajectory_with_itself_is_zero(
        radius in 0.5..5.0f64,
        turns in 0.1..2.0f64,
        frames in 2usize..20,
    ) {
        let params = TrajectoryParams { radius, turns, ..TrajectoryParams::default() };
        let traj = make_trajectory(TrajectoryKind::Spiral, frames, &params).unwrap();
        let (trans, rot) = rpe(&traj, &traj).unwrap();
        prop_assert!(trans.abs() < 1e-12 && rot.abs() < 1e-9);
    }

    #[test]
    fn guidance_decays_monotonically(gamma_max in 0.0..20.0f64, steps in 1usize..60) {
        let schedule = GuidanceSchedule { gamma_max, steps };
        let values: Vec<f64> = (0..=steps).map(|k| guidance_gamma(&schedule, k).unwrap()).collect();
        prop_assert!((values[0] - (1.0 + gamma_max)).abs() < 1e-12);
        prop_assert_eq!(values[steps], 1.0);
        prop_assert!(values.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(guidance_gamma(&schedule, steps + 1).is_err());
    }

    #[test]
    fn stage_plan_json_round_trip(a in 1usize..2000, b in 1usize..2000, c in 1usize..2000) {
        let plan = StagePlan::with_iterations([a, b, c]);
        prop_assert!(plan.validate().is_ok());
        prop_assert_eq!(plan.total_iterations(), a + b + c);
        prop_assert_eq!(StagePlan::from_json(&plan.to_json()).unwrap(), plan);
    }
}
