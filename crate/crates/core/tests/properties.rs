use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;

use ivuscal_core::geometry::{compose, euler_to_rotation, kabsch_align, orthonormality_error};
use ivuscal_core::io::{
    calibration_from_str, calibration_to_string, observations_from_csv, observations_to_csv,
    phantom_from_csv, phantom_to_csv, poses_from_csv, poses_to_csv, StoredCalibration,
};
use ivuscal_core::sim::ImageGeometry;
use ivuscal_core::{
    build_phantom, calibration_matrix, default_phantom, objective_gradient, paste_frames,
    plan_volume, registered_error, simulate_acquisition, solve, AcquisitionSpec, CalibrationParams,
    CalibrationProblem, Compounding, FrameImage, GrayImage, Homogeneous4, LandmarkObservation,
    OptimizerConfig, PhantomModel, PhantomSpec, Point3, RigidTransform,
};

fn angle() -> impl Strategy<Value = f64> {
    -PI..PI
}

fn rigid() -> impl Strategy<Value = RigidTransform> {
    (
        prop::array::uniform4(-1.0f64..1.0),
        prop::array::uniform3(-100.0f64..100.0),
    )
        .prop_filter("non-degenerate quaternion", |(q, _)| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
        .prop_map(|(q, t)| {
            let q =
                UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            RigidTransform::new_unchecked(*q.to_rotation_matrix().matrix(), Vector3::from(t))
        })
}

fn params() -> impl Strategy<Value = CalibrationParams> {
    let a = 20f64.to_radians();
    (
        -a..a,
        -a..a,
        -a..a,
        -10.0..10.0,
        -10.0..10.0,
        -10.0..10.0,
        0.5..1.5,
    )
        .prop_map(|(roll, pitch, yaw, tx, ty, tz, scale)| CalibrationParams {
            roll,
            pitch,
            yaw,
            tx,
            ty,
            tz,
            scale,
        })
}

fn small_problem(gt: &CalibrationParams, seed: u64) -> CalibrationProblem {
    let spec = AcquisitionSpec {
        pose_count: 36,
        seed,
        ..AcquisitionSpec::default()
    };
    let phantom = default_phantom();
    let seq = simulate_acquisition(&phantom, gt, &spec).unwrap();
    CalibrationProblem::new(phantom, seq.observations, seq.poses).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn euler_rotation_is_proper(r in angle(), p in angle(), y in angle()) {
        let m = euler_to_rotation(r, p, y);
        prop_assert!(orthonormality_error(&m) <= 1e-9);
        prop_assert!((m.determinant() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn kabsch_recovers_rigid_motion(
        g in rigid(),
        pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 4..20),
    ) {
        let src: Vec<Point3> = pts.iter().map(|p| Point3::from(*p)).collect();
        // Skip nearly coplanar sets; recovery is only guaranteed for 3D spreads.
        let c = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / src.len() as f64;
        let cov = src.iter().fold(Matrix3::zeros(), |acc, p| acc + (p.coords - c) * (p.coords - c).transpose());
        let sv = cov.singular_values();
        prop_assume!(sv.min() > 1e-2 * sv.max());
        let dst: Vec<Point3> = src.iter().map(|p| g.apply(p)).collect();
        let est = kabsch_align(&src, &dst).unwrap();
        prop_assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
        prop_assert!((est.rotation() - g.rotation()).norm() <= 1e-9);
        prop_assert!((est.translation() - g.translation()).norm() <= 1e-9);
    }

    #[test]
    fn kabsch_never_reflects(
        pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 4..12),
        tgt in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 12),
    ) {
        let src: Vec<Point3> = pts.iter().map(|p| Point3::from(*p)).collect();
        let dst: Vec<Point3> = tgt[..src.len()].iter().map(|p| Point3::from(*p)).collect();
        if let Ok(est) = kabsch_align(&src, &dst) {
            prop_assert!((est.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_then_apply_is_sequential(a in rigid(), b in rigid(), s in 0.1f64..3.0, p in prop::array::uniform3(-100.0f64..100.0)) {
        let scaled = compose(&Homogeneous4::uniform_scale(s), &b.to_homogeneous());
        let p = Point3::from(p);
        let lhs = compose(&a.to_homogeneous(), &scaled).apply(&p);
        let rhs = a.to_homogeneous().apply(&scaled.apply(&p));
        prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.coords.norm()));
    }

    #[test]
    fn calibration_matrix_structure(p in params()) {
        let m = calibration_matrix(&p);
        let r = m.linear() / p.scale;
        prop_assert!(orthonormality_error(&r) <= 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
        let bottom = m.matrix().row(3).into_owned();
        prop_assert_eq!(bottom, nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn phantom_build_is_deterministic(r in 60.0f64..100.0, a in 0.0f64..90.0) {
        let spec = PhantomSpec { cavity_radius_mm: r, cluster_angles_deg: vec![a, a + 30.0, a + 60.0], ..PhantomSpec::default() };
        let one = build_phantom(&spec).unwrap();
        let two = build_phantom(&spec).unwrap();
        prop_assert_eq!(&one, &two);
        for tip in one.landmarks() {
            let radial = tip.x.hypot(tip.y);
            prop_assert!(radial >= r - 50.0 - 1e-9 && radial <= r - 10.0 + 1e-9);
        }
    }

    #[test]
    fn phantom_csv_round_trip(pts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..30)) {
        let model = PhantomModel::from_landmarks(pts.iter().map(|p| Point3::from(*p)).collect()).unwrap();
        let text = phantom_to_csv(&model);
        let loaded = phantom_from_csv(&text, "p").unwrap();
        prop_assert_eq!(phantom_to_csv(&loaded), text);
        for (a, b) in loaded.landmarks().iter().zip(model.landmarks()) {
            prop_assert!((a - b).norm() <= 1e-8 * (1.0 + b.coords.norm()));
        }
    }

    #[test]
    fn poses_csv_round_trip(poses in prop::collection::btree_map(0u32..10_000, rigid(), 1..20)) {
        let text = poses_to_csv(&poses);
        let loaded = poses_from_csv(&text, "q").unwrap();
        prop_assert_eq!(&loaded, &poses);
        prop_assert_eq!(poses_to_csv(&loaded), text);
    }

    #[test]
    fn observations_csv_round_trip(rows in prop::collection::btree_map((0u32..50, 0u32..15), (0.0f64..680.0, 0.0f64..480.0), 1..40)) {
        let obs: Vec<LandmarkObservation> = rows
            .iter()
            .map(|(&(frame, landmark_id), &(u, v))| LandmarkObservation { frame, landmark_id, u, v })
            .collect();
        let text = observations_to_csv(&obs);
        let loaded = observations_from_csv(&text, "o").unwrap();
        prop_assert_eq!(loaded.len(), obs.len());
        prop_assert_eq!(observations_to_csv(&loaded), text);
        for (a, b) in loaded.iter().zip(&obs) {
            prop_assert_eq!((a.frame, a.landmark_id), (b.frame, b.landmark_id));
            prop_assert!((a.u - b.u).abs() <= 1e-6 && (a.v - b.v).abs() <= 1e-6);
        }
    }

    #[test]
    fn calibration_file_round_trip(p in params(), err in 0.0f64..1e3, iters in 0usize..100_000, conv: bool) {
        let c = StoredCalibration { final_error: err, iterations: iters, converged: conv, ..StoredCalibration::from_params(p, Some(90.0)) };
        let loaded = calibration_from_str(&calibration_to_string(&c), "c").unwrap();
        prop_assert_eq!(loaded, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gauge_invariance(gt in params(), g in rigid(), p in params(), seed in 0u64..1000) {
        let problem = small_problem(&gt, seed);
        let moved = problem.with_world_transform(&g);
        let (a, _) = registered_error(&problem, &p).unwrap();
        let (b, _) = registered_error(&moved, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn gradient_matches_central_differences(gt in params(), p in params(), seed in 0u64..1000) {
        let problem = small_problem(&gt, seed);
        let g = objective_gradient(&problem, &p).unwrap();
        let steps = [1e-6, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4, 1e-6];
        let base = p.to_array();
        for k in 0..7 {
            let eval = |d: f64| {
                let mut x = base;
                x[k] += d;
                registered_error(&problem, &CalibrationParams::from_array(x)).unwrap().0
            };
            let fd = (eval(steps[k]) - eval(-steps[k])) / (2.0 * steps[k]);
            prop_assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "component {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn solve_is_deterministic(gt in params(), seed in 0u64..1000) {
        let problem = small_problem(&gt, seed);
        let config = OptimizerConfig { max_iters: 300, ..OptimizerConfig::default() };
        let a = solve(&problem, &config, &CalibrationParams::IDENTITY).unwrap();
        let b = solve(&problem, &config, &CalibrationParams::IDENTITY).unwrap();
        prop_assert_eq!(a.error_trace, b.error_trace);
        prop_assert_eq!(a.params, b.params);
    }

    #[test]
    fn observations_are_visible(gt in params(), seed in 0u64..1000, all: bool) {
        let spec = AcquisitionSpec {
            pose_count: 60,
            seed,
            annotation: if all { ivuscal_core::sim::AnnotationMode::AllVisible } else { ivuscal_core::sim::AnnotationMode::CentralSlice },
            ..AcquisitionSpec::default()
        };
        let phantom = default_phantom();
        let seq = simulate_acquisition(&phantom, &gt, &spec).unwrap();
        let c = calibration_matrix(&gt);
        let img = ImageGeometry::default();
        for o in &seq.observations {
            prop_assert!(o.u >= 0.0 && o.u <= (img.width - 1) as f64);
            prop_assert!(o.v >= 0.0 && o.v <= (img.height - 1) as f64);
            prop_assert!(o.v * gt.scale <= img.depth_mm + 1e-9);
            // Distance from the tip to the image plane stays inside the slab.
            let tip = seq.world_from_phantom.apply(phantom.landmark(o.landmark_id).unwrap());
            let to_image = seq.poses[&o.frame].to_homogeneous();
            let plane_point = to_image.apply(&c.apply(&Point3::new(o.u, o.v, 0.0)));
            prop_assert!((tip - plane_point).norm() <= img.slab_half_thickness_mm + 1e-9);
        }
    }
}

#[test]
fn noise_monotonicity() {
    let phantom = default_phantom();
    let mean_residual = |sigma: f64| {
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..20 {
            let gt = ivuscal_core::random_calibration(&Default::default(), seed).unwrap();
            let spec = AcquisitionSpec {
                pixel_noise_sigma: sigma,
                seed,
                ..AcquisitionSpec::default()
            };
            let seq = simulate_acquisition(&phantom, &gt, &spec).unwrap();
            let c = calibration_matrix(&gt);
            for o in &seq.observations {
                let tip = seq
                    .world_from_phantom
                    .apply(phantom.landmark(o.landmark_id).unwrap());
                let p = seq.poses[&o.frame].apply(&c.apply(&Point3::new(o.u, o.v, 0.0)));
                total += (p - tip).norm();
                n += 1;
            }
        }
        total / n as f64
    };
    let r: Vec<f64> = [0.0, 0.5, 2.0].into_iter().map(mean_residual).collect();
    assert!(r[0] <= r[1] && r[1] <= r[2], "{r:?}");
    assert!(r[2] > r[0]);
}

fn random_frame(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut img = GrayImage::new(w, h);
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    for p in img.pixels.iter_mut() {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        *p = (state >> 56) as u8;
    }
    img
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mean_paste_conserves_intensity(
        poses in prop::collection::vec(rigid(), 1..4),
        s in 0.3f64..2.0,
        spacing in 0.5f64..3.0,
        padding in 0.0f64..5.0,
        shrink in 0.5f64..1.0,
        seed: u64,
    ) {
        let frames: Vec<FrameImage> = poses
            .iter()
            .enumerate()
            .map(|(k, pose)| FrameImage { image: random_frame(12, 9, seed ^ k as u64), pose: *pose })
            .collect();
        let calib = Homogeneous4::uniform_scale(s);
        let mut plan = plan_volume(&frames, &calib, spacing, padding).unwrap();
        // Crop the grid so that some pixels are dropped too.
        for d in plan.dims.iter_mut() {
            *d = ((*d as f64 * shrink) as usize).max(1);
        }
        let out = paste_frames(&frames, &calib, &plan, Compounding::Mean);
        let kept: u64 = out
            .volume
            .data
            .iter()
            .zip(&out.volume.weight)
            .map(|(d, w)| (*d as f64 * *w as f64).round() as u64)
            .sum();
        prop_assert_eq!(kept, out.total_intensity - out.dropped_intensity);
        let weights: u64 = out.volume.weight.iter().map(|&w| w as u64).sum();
        prop_assert_eq!(weights + out.dropped_pixels, (frames.len() * 12 * 9) as u64);
    }

    #[test]
    fn padding_never_increases_drops(
        poses in prop::collection::vec(rigid(), 1..4),
        spacing in 0.5f64..3.0,
        pad_a in 0.0f64..4.0,
        extra in 0.0f64..4.0,
    ) {
        let frames: Vec<FrameImage> = poses
            .iter()
            .map(|pose| FrameImage { image: random_frame(10, 8, 3), pose: *pose })
            .collect();
        let calib = Homogeneous4::identity();
        let drops = |pad: f64| {
            let plan = plan_volume(&frames, &calib, spacing, pad).unwrap();
            paste_frames(&frames, &calib, &plan, Compounding::Mean).dropped_pixels
        };
        prop_assert!(drops(pad_a + extra) <= drops(pad_a));
    }

    #[test]
    fn quarter_turns_permute_voxels(
        poses in prop::collection::vec(rigid(), 1..3),
        axis in 0usize..3,
        turns in 1usize..4,
        seed: u64,
    ) {
        // Translations on a 1 mm lattice keep every pixel away from voxel
        // boundaries in both grids after the exact integer rotation.
        let frames: Vec<FrameImage> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let t = p.translation().map(|v| v.round());
                let r = quarter_turn(k % 3, k + 1);
                FrameImage { image: random_frame(7, 5, seed ^ k as u64), pose: RigidTransform::new_unchecked(r, t) }
            })
            .collect();
        let calib = Homogeneous4::identity();
        let spacing = 1.0;
        // Grid on the same integer lattice as the pixels, one voxel of margin.
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for f in &frames {
            for (u, v) in [(0.0, 0.0), (6.0, 0.0), (0.0, 4.0), (6.0, 4.0)] {
                let p = f.pose.apply(&Point3::new(u, v, 0.0)).coords;
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        let dims = (hi - lo).map(|e| e as usize + 3);
        let plan = ivuscal_core::VolumePlan {
            dims: [dims.x, dims.y, dims.z],
            origin: Point3::from(lo.add_scalar(-1.0)),
            spacing,
        };
        let vol = paste_frames(&frames, &calib, &plan, Compounding::Latest).volume;

        let g = RigidTransform::new_unchecked(quarter_turn(axis, turns), Vector3::new(3.0, -7.0, 11.0));
        let moved: Vec<FrameImage> = frames
            .iter()
            .map(|f| FrameImage { image: f.image.clone(), pose: g.then_after(&f.pose) })
            .collect();
        // The rotated grid: same voxels, axes permuted and possibly reversed.
        let corner_far = plan.origin + Vector3::new(
            (plan.dims[0] - 1) as f64, (plan.dims[1] - 1) as f64, (plan.dims[2] - 1) as f64,
        ) * spacing;
        let (a, b) = (g.apply(&plan.origin), g.apply(&corner_far));
        let lo = Point3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z));
        let ext = (b - a).abs() / spacing;
        let plan2 = ivuscal_core::VolumePlan {
            dims: [ext.x.round() as usize + 1, ext.y.round() as usize + 1, ext.z.round() as usize + 1],
            origin: lo,
            spacing,
        };
        let vol2 = paste_frames(&moved, &calib, &plan2, Compounding::Latest).volume;

        let mut count = BTreeMap::new();
        for i in 0..plan.dims[0] {
            for j in 0..plan.dims[1] {
                for k in 0..plan.dims[2] {
                    let p = g.apply(&vol.voxel_center(i, j, k));
                    let q = (p - lo) / spacing;
                    let idx2 = vol2.index(q.x.round() as usize, q.y.round() as usize, q.z.round() as usize);
                    let idx = vol.index(i, j, k);
                    prop_assert_eq!(vol.data[idx], vol2.data[idx2]);
                    prop_assert_eq!(vol.weight[idx], vol2.weight[idx2]);
                    *count.entry(idx2).or_insert(0) += 1;
                }
            }
        }
        prop_assert_eq!(count.len(), vol2.data.len());
    }
}

/// Rotation by `turns · 90°` about coordinate axis `axis`, with exact entries.
fn quarter_turn(axis: usize, turns: usize) -> Matrix3<f64> {
    let step = match axis {
        0 => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        1 => Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0),
        _ => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
    };
    (0..turns % 4).fold(Matrix3::identity(), |m, _| step * m)
}
