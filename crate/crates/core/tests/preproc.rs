use cmm_core::config::PipelineConfig;
use cmm_core::geometry::RigidTransform;
use cmm_core::preproc::{apply_transform, estimate_ground_calibration, geofence, GeofenceBounds};
use cmm_core::scene::{simulate, Point, PointCloudFrame};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(seed: u64, n: usize, span: f64) -> PointCloudFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(-span..span),
                rng.random_range(-span..span),
                rng.random_range(-8.0..3.0),
                rng.random_range(0.0..=1.0),
            )
        })
        .collect();
    PointCloudFrame::new(3.5, pts)
}

#[test]
fn geofence_matches_scalar_filter_on_10k_points() {
    let f = random_frame(11, 10_000, 70.0);
    let b = GeofenceBounds::default();
    let brute: Vec<Point> = f
        .points
        .iter()
        .copied()
        .filter(|p| {
            p.x >= -51.2 && p.x <= 51.2 && p.y >= -51.2 && p.y <= 51.2 && p.z >= -5.0 && p.z <= 0.0
        })
        .collect();
    let g = geofence(&f, &b);
    assert_eq!(g.t, f.t);
    assert_eq!(g.points, brute);
    assert!(!brute.is_empty() && brute.len() < f.points.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn geofence_is_idempotent_ordered_subset(seed in any::<u64>()) {
        let f = random_frame(seed, 500, 60.0);
        let b = GeofenceBounds::default();
        let once = geofence(&f, &b);
        prop_assert_eq!(&geofence(&once, &b), &once);
        // order preserved: `once` is a subsequence of the input
        let mut it = f.points.iter();
        for p in &once.points {
            prop_assert!(it.any(|q| q == p));
        }
    }

    #[test]
    fn rigid_transform_preserves_pairwise_distances(
        seed in any::<u64>(),
        (r, p, y) in (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64),
        t in proptest::array::uniform3(-100.0..100.0f64),
    ) {
        let f = random_frame(seed, 1000, 50.0);
        let tf = RigidTransform::from_euler(r, p, y, Vector3::from(t));
        let g = apply_transform(&f, &tf).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..2000 {
            let i = rng.random_range(0..1000);
            let j = rng.random_range(0..1000);
            let d0 = (f.points[i].xyz() - f.points[j].xyz()).norm();
            let d1 = (g.points[i].xyz() - g.points[j].xyz()).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
            prop_assert_eq!(g.points[i].i, f.points[i].i);
        }
    }
}

#[test]
fn non_rigid_transform_is_rejected() {
    let mut m = nalgebra::Matrix4::identity();
    m[(0, 0)] = 2.0;
    assert!(RigidTransform::from_matrix(m).is_err());
    m[(0, 0)] = -1.0;
    assert!(RigidTransform::from_matrix(m).is_err());
}

#[test]
fn calibration_levels_simulated_ground() {
    let mut cfg = PipelineConfig::default();
    cfg.scene.duration = 0.1;
    cfg.scene.points_per_agent = 0;
    let scenario = cfg.scenario().unwrap();
    let frame = &simulate(&scenario).unwrap()[0].frame;
    let params = cfg.calibration_params();
    let fenced = geofence(frame, &GeofenceBounds::default());
    let cal = estimate_ground_calibration(&fenced, &params).unwrap();
    let leveled = apply_transform(&fenced, &cal.transform).unwrap();
    let rms = (leveled.points.iter().map(|p| (p.z + params.mount_height).powi(2)).sum::<f64>()
        / leveled.points.len() as f64)
        .sqrt();
    assert!(rms <= 0.05, "rms {rms}");
    let n = cal.transform.rotation() * cal.normal;
    assert!((n - Vector3::z()).norm() < 1e-9, "{n}");
}
