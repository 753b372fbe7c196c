use std::f64::consts::{FRAC_PI_2, PI};

use cmm_core::detect::{
    decode_box_residuals, detect_cluster, detect_oracle, direction_label, direction_loss,
    encode_box_residuals, focal_loss, localization_loss, total_loss, BoxResiduals, ClusterParams,
    LossWeights, OracleNoise,
};
use cmm_core::geometry::{normalize_angle, ObjectClass, OrientedBox3D};
use cmm_core::preproc::GeofenceBounds;
use cmm_core::scene::{box_to_world, sample_box_surface_local, AgentState, Point, PointCloudFrame};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// -0.25 (1-p)^2 ln p evaluated with 50-digit mpmath.
const FOCAL_ORACLE: [(f64, f64); 7] = [
    (0.5, 0.04332169878499658),
    (0.01, 1.128381824821732),
    (0.1, 0.4662734813312942),
    (0.3, 0.1474866685299272),
    (0.7, 0.008025186238621479),
    (0.9, 0.0002634012891445658),
    (0.999, 2.501250833958834e-10),
];

fn residuals(a: [f64; 7]) -> BoxResiduals {
    BoxResiduals {
        dx: a[0],
        dy: a[1],
        dz: a[2],
        dw: a[3],
        dl: a[4],
        dh: a[5],
        dtheta: a[6],
    }
}

#[test]
fn focal_loss_matches_high_precision_oracle() {
    let w = LossWeights::default();
    for (p, expect) in FOCAL_ORACLE {
        let got = focal_loss(p, &w).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.max(1.0), "p={p}: {got} vs {expect}");
    }
    assert_eq!(focal_loss(1.0, &w).unwrap(), 0.0);
}

#[test]
fn localization_loss_matches_high_precision_oracle() {
    // Smooth-L1 sums evaluated in exact decimal arithmetic.
    let cases = [
        ([0.1, -0.2, 0.35, 0.05, -1.7, 0.9, 0.25], [0.0, 0.4, -0.15, 2.5, 0.2, 0.1, -0.5], 4.26125),
        ([3.0, -2.5, 0.0, 0.7, 0.7, -0.3, 1.0], [-1.0, 1.2, 0.999, 0.7, -0.3, 0.6, -1.0], 9.6040005),
    ];
    for (p, t, expect) in cases {
        let got = localization_loss(&residuals(p), &residuals(t));
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}

#[test]
fn total_loss_with_reference_weights() {
    let w = LossWeights::default();
    assert_eq!((w.beta_loc, w.beta_cls, w.beta_dir), (2.0, 1.0, 0.2));
    // (2*1 + 1*1 + 0.2*1) / 1
    assert!((total_loss(1.0, 1.0, 1.0, 1, &w).unwrap() - 3.2).abs() < 1e-15);
    // (2*0.5 + 1*0.25 + 0.2*0.75) / 4 = 1.4 / 4
    assert!((total_loss(0.5, 0.25, 0.75, 4, &w).unwrap() - 0.35).abs() < 1e-15);
    assert!(total_loss(1.0, 1.0, 1.0, 0, &w).is_err());
}

#[test]
fn focal_loss_is_monotone_on_a_grid() {
    let w = LossWeights::default();
    let mut prev = f64::INFINITY;
    for k in 1..=1000 {
        let p = k as f64 / 1000.0;
        let l = focal_loss(p, &w).unwrap();
        assert!(l >= 0.0);
        assert!(l < prev || (l == 0.0 && prev == 0.0), "p={p}");
        prev = l;
    }
}

#[test]
fn direction_loss_decreases_on_a_ramp() {
    assert!((direction_loss(0.3, 0.3, false) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((direction_loss(-2.0, -2.0, true) - std::f64::consts::LN_2).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for k in 0..200 {
        let l = direction_loss(k as f64 * 0.25, 0.0, false);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-20);
}

fn box_strategy() -> impl Strategy<Value = OrientedBox3D> {
    (
        proptest::array::uniform3(-50.0..50.0f64),
        proptest::array::uniform3(0.2..12.0f64),
        -PI..PI,
    )
        .prop_map(|(c, d, th)| OrientedBox3D::new(c[0], c[1], c[2], d[0], d[1], d[2], th).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn residual_roundtrip_in_heading_band(gt in box_strategy(), anchor in box_strategy(), off in -FRAC_PI_2..FRAC_PI_2) {
        let gt = OrientedBox3D { theta: normalize_angle(anchor.theta + off), ..gt };
        let r = encode_box_residuals(&gt, &anchor).unwrap();
        let flipped = direction_label(&gt, &anchor);
        prop_assert!(!flipped);
        let back = decode_box_residuals(&r, &anchor, flipped).unwrap();
        for (a, b) in [(back.x, gt.x), (back.y, gt.y), (back.z, gt.z), (back.w, gt.w), (back.l, gt.l), (back.h, gt.h)] {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        prop_assert!(normalize_angle(back.theta - gt.theta).abs() <= 1e-12);
    }

    #[test]
    fn direction_bit_rotates_decoded_heading_by_pi(gt in box_strategy(), anchor in box_strategy(), off in 1.6..4.6f64) {
        let gt = OrientedBox3D { theta: normalize_angle(anchor.theta + off), ..gt };
        prop_assert!(direction_label(&gt, &anchor));
        let r = encode_box_residuals(&gt, &anchor).unwrap();
        let plain = decode_box_residuals(&r, &anchor, false).unwrap();
        let flipped = decode_box_residuals(&r, &anchor, true).unwrap();
        prop_assert!((normalize_angle(flipped.theta - plain.theta).abs() - PI).abs() <= 1e-12);
        prop_assert_eq!((flipped.x, flipped.w), (plain.x, plain.w));
    }

    #[test]
    fn localization_loss_is_componentwise_sum(p in proptest::array::uniform7(-5.0..5.0f64), t in proptest::array::uniform7(-5.0..5.0f64)) {
        let brute: f64 = p.iter().zip(&t).map(|(a, b)| {
            let d = (a - b).abs();
            if d < 1.0 { 0.5 * d * d } else { d - 0.5 }
        }).sum();
        prop_assert!((localization_loss(&residuals(p), &residuals(t)) - brute).abs() < 1e-12);
        prop_assert_eq!(localization_loss(&residuals(p), &residuals(p)), 0.0);
    }

    #[test]
    fn focal_loss_positive_below_one(p in 1e-12..0.999_999f64) {
        prop_assert!(focal_loss(p, &LossWeights::default()).unwrap() > 0.0);
    }

    #[test]
    fn direction_label_swap_symmetry(a in -30.0..30.0f64, b in -30.0..30.0f64) {
        prop_assert_eq!(direction_loss(a, b, false), direction_loss(b, a, true));
        prop_assert!(direction_loss(a, b, false) >= 0.0);
    }

    #[test]
    fn total_loss_scales_inversely_with_positives(loc in 0.0..10.0f64, cls in 0.0..10.0f64, dir in 0.0..10.0f64, n in 1usize..1000) {
        let w = LossWeights::default();
        let a = total_loss(loc, cls, dir, n, &w).unwrap();
        let b = total_loss(loc, cls, dir, 2 * n, &w).unwrap();
        prop_assert!((a - 2.0 * b).abs() <= 1e-12 * a.max(1.0));
    }
}

fn agent(id: i32, b: OrientedBox3D, class: ObjectClass) -> AgentState {
    AgentState {
        agent_id: id,
        class,
        center: Vector3::new(b.x, b.y, b.z),
        dims: [b.w, b.l, b.h],
        heading: b.theta,
        speed: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_noise_oracle_is_identity(boxes in proptest::collection::vec(box_strategy(), 0..12), seed in any::<u64>()) {
        let agents: Vec<_> = boxes.iter().enumerate().map(|(k, b)| agent(k as i32, *b, ObjectClass::Vehicle)).collect();
        let dets = detect_oracle(&agents, &OracleNoise::default(), &GeofenceBounds::default(), seed).unwrap();
        prop_assert_eq!(dets.len(), boxes.len());
        for (d, b) in dets.iter().zip(&boxes) {
            prop_assert_eq!(d.bbox, *b);
            prop_assert_eq!(d.score, 1.0);
        }
    }

    #[test]
    fn cluster_outputs_are_valid_boxes(seed in any::<u64>(), n_boxes in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for k in 0..n_boxes {
            let b = OrientedBox3D::new(-40.0 + 20.0 * k as f64, 5.0, -4.74 + 0.8, 1.9, 4.6, 1.6, 0.4 * k as f64).unwrap();
            for p in sample_box_surface_local(&b, 300, &mut rng) {
                let w = box_to_world(&b, &p);
                pts.push(Point::new(w.x, w.y, w.z, 0.5));
            }
        }
        let dets = detect_cluster(&PointCloudFrame::new(0.0, pts), &ClusterParams::default());
        prop_assert_eq!(dets.len(), n_boxes);
        for d in &dets {
            prop_assert!(d.bbox.validate().is_ok());
            prop_assert!(d.bbox.theta > -PI && d.bbox.theta <= PI);
        }
    }
}
