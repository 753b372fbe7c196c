use cmm_core::detect::Detection;
use cmm_core::eval::{
    compute_metrics, latency_report, match_detections, parse_counts, ClockDomains,
    ConfusionCounts, IdSwitchCounter, Metric, StageTimings,
};
use cmm_core::geometry::{ObjectClass, OrientedBox3D};
use cmm_core::wire::PhaseStamps;
use proptest::prelude::*;

fn bx(x: f64, y: f64) -> OrientedBox3D {
    OrientedBox3D::new(x, y, 0.8, 1.9, 4.6, 1.6, 0.0).unwrap()
}

fn det(x: f64, y: f64) -> Detection {
    Detection {
        bbox: bx(x, y),
        class: ObjectClass::Vehicle,
        score: 0.9,
    }
}

/// Largest one-to-one matching within the threshold, by exhaustive search.
fn brute_max_matching(gt: &[OrientedBox3D], dets: &[Detection], thr: f64) -> u64 {
    fn go(i: usize, gt: &[OrientedBox3D], dets: &[Detection], used: &mut Vec<bool>, thr: f64) -> u64 {
        if i == gt.len() {
            return 0;
        }
        let mut best = go(i + 1, gt, dets, used, thr);
        for j in 0..dets.len() {
            if !used[j] && gt[i].ground_distance(&dets[j].bbox) <= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, gt, dets, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, gt, dets, &mut vec![false; dets.len()], thr)
}

#[test]
fn table_one_counts_reproduce_reported_rates() {
    let c = ConfusionCounts::from_totals(1389, 43, 1661).unwrap();
    assert_eq!(c.fn_, 272);
    let m = compute_metrics(&c);
    let pct = |x: Metric| x.value().unwrap() * 100.0;
    assert!((pct(m.precision) - 96.99).abs() <= 0.01);
    assert!((pct(m.recall) - 83.62).abs() <= 0.01);
    assert!((pct(m.miss) - 16.38).abs() <= 0.01);
    // 1389 / 1432 = 96.997%; the display rounds to two places
    assert_eq!(m.precision.to_string(), "97.00%");
    assert_eq!(m.recall.to_string(), "83.62%");
    assert_eq!(m.miss.to_string(), "16.38%");
    assert_eq!(parse_counts("tp = 1389\nfp = 43\ngt = 1661\n").unwrap(), c);
}

#[test]
fn degenerate_and_perfect_metrics() {
    let m = compute_metrics(&ConfusionCounts::default());
    assert_eq!(m.precision, Metric::Undefined);
    assert_eq!(m.recall, Metric::Undefined);
    assert_eq!(m.precision.to_string(), "undefined");
    let m = compute_metrics(&ConfusionCounts::from_totals(7, 0, 7).unwrap());
    assert_eq!((m.precision, m.recall, m.miss), (Metric::Defined(1.0), Metric::Defined(1.0), Metric::Defined(0.0)));
}

#[test]
fn parse_counts_rejects_bad_input() {
    assert!(parse_counts("tp = 1\n").is_err());
    assert!(parse_counts("tp = 5\nfp = 0\ngt = 3\n").is_err());
    assert!(parse_counts("tp = 1\nfp = 0\ngt = 3\nfn = 1\n").is_err());
    assert!(parse_counts("tp = x\nfp = 0\ngt = 3\n").is_err());
    assert_eq!(parse_counts("tp = 2\nfp = 1\nfn = 3\n").unwrap().ground_truth_total, 5);
}

#[test]
fn simple_matching_cases() {
    let gt: Vec<_> = (0..5).map(|k| bx(10.0 * k as f64, 0.0)).collect();
    let same: Vec<_> = gt.iter().map(|b| det(b.x, b.y)).collect();
    let c = match_detections(&gt, &same, 2.0).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_), (5, 0, 0));
    let c = match_detections(&gt, &[], 2.0).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 5));
    assert!(match_detections(&gt, &same, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn greedy_agrees_with_exhaustive_on_separated_scenes(
        jitter in proptest::collection::vec((-1.4..1.4f64, -1.4..1.4f64, any::<bool>()), 15),
        extras in proptest::collection::vec((0usize..15, 3.0..4.0f64), 0..4),
    ) {
        // ground truth on a 10 m grid; each detection lies near at most one box
        let gt: Vec<_> = (0..15).map(|k| bx(10.0 * (k % 5) as f64, 10.0 * (k / 5) as f64)).collect();
        let mut dets: Vec<_> = gt
            .iter()
            .zip(&jitter)
            .filter(|(_, j)| j.2)
            .map(|(b, j)| det(b.x + j.0, b.y + j.1))
            .collect();
        dets.extend(extras.iter().map(|&(k, off)| det(gt[k].x + off, gt[k].y + off)));
        let c = match_detections(&gt, &dets, 2.0).unwrap();
        prop_assert_eq!(c.tp + c.fn_, 15);
        prop_assert_eq!(c.tp + c.fp, dets.len() as u64);
        let small_gt = &gt[..8];
        let small_dets: Vec<_> = dets.iter().copied().filter(|d| d.bbox.y < 5.0 || (d.bbox.y < 15.0 && d.bbox.x < 25.0)).collect();
        let g = match_detections(small_gt, &small_dets, 2.0).unwrap();
        prop_assert_eq!(g.tp, brute_max_matching(small_gt, &small_dets, 2.0));
    }

    #[test]
    fn count_identities_and_metric_ranges(
        gt in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 0..12),
        dets in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 0..12),
        thr in 0.1..10.0f64,
    ) {
        let gt: Vec<_> = gt.iter().map(|&(x, y)| bx(x, y)).collect();
        let dets: Vec<_> = dets.iter().map(|&(x, y)| det(x, y)).collect();
        let c = match_detections(&gt, &dets, thr).unwrap();
        prop_assert_eq!(c.tp + c.fn_, gt.len() as u64);
        prop_assert_eq!(c.tp + c.fp, dets.len() as u64);
        prop_assert_eq!(c.tn, 0);
        prop_assert!(c.tp <= brute_max_matching(&gt[..gt.len().min(7)], &dets, thr) + gt.len().saturating_sub(7) as u64);
        let m = compute_metrics(&c);
        for v in [m.precision, m.recall, m.miss].into_iter().filter_map(Metric::value) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let (Some(r), Some(s)) = (m.recall.value(), m.miss.value()) {
            prop_assert!((r + s - 1.0).abs() < 1e-12);
        }
    }
}

fn stamps(k: usize, t: f64, gaps: [f64; 3]) -> PhaseStamps {
    let t0 = t + k as f64 * 0.0;
    PhaseStamps {
        t_sensor: Some(t0),
        t_edge_in: Some(t0 + gaps[0]),
        t_edge_out: Some(t0 + gaps[0] + gaps[1]),
        t_onboard: Some(t0 + gaps[0] + gaps[1] + gaps[2]),
    }
}

#[test]
fn known_gaps_give_exact_medians_and_throughput() {
    let s: Vec<_> = (0..100).map(|k| stamps(k, k as f64 * 0.1, [0.010, 0.050, 0.030])).collect();
    let r = latency_report(&s, &[], ClockDomains::single()).unwrap();
    for (p, want) in [(r.phase1, 10.0), (r.phase2, 50.0), (r.phase3, 30.0)] {
        let p = p.unwrap();
        assert!((p.median_ms - want).abs() < 1e-6, "{} vs {want}", p.median_ms);
        assert!(!p.skew_uncertain);
    }
    assert!((r.total_ms - 90.0).abs() < 1e-6);
    assert!((r.throughput_hz.unwrap() - 10.0).abs() <= 0.1);
    assert!(r.stages_ms.is_empty());
}

#[test]
fn cross_domain_phase_is_flagged() {
    // onboard clock runs 100 ms ahead
    let s: Vec<_> = (0..10).map(|k| stamps(k, k as f64 * 0.1, [0.010, 0.050, 0.030 + 0.100])).collect();
    let r = latency_report(&s, &[], ClockDomains::default()).unwrap();
    let p3 = r.phase3.unwrap();
    assert!(p3.skew_uncertain);
    assert!((p3.median_ms - 130.0).abs() < 1e-6);
    assert!(!r.phase1.unwrap().skew_uncertain);
    assert!(r.total_skew_uncertain);
    assert!(latency_report(&[], &[], ClockDomains::default()).is_err());
}

#[test]
fn stage_breakdown_uses_medians() {
    let s: Vec<_> = (0..3).map(|k| stamps(k, k as f64, [0.0, 0.02, 0.0])).collect();
    let timers: Vec<_> = [1.0, 3.0, 2.0]
        .iter()
        .map(|&x| StageTimings {
            preprocessing: x * 1e-3,
            detection: 2.0 * x * 1e-3,
            tracking: 0.0,
            geolocalization: 0.0,
            encoding: 0.0,
        })
        .collect();
    let r = latency_report(&s, &timers, ClockDomains::single()).unwrap();
    let get = |n: &str| r.stages_ms.iter().find(|s| s.0 == n).unwrap().1;
    assert!((get("preprocessing") - 2.0).abs() < 1e-9);
    assert!((get("detection") - 4.0).abs() < 1e-9);
    assert_eq!(r.stages_ms.len(), 5);
}

#[test]
fn id_switches_count_changes_only() {
    let mut c = IdSwitchCounter::default();
    c.update(&[(1, 10), (2, 11)]);
    c.update(&[(1, 10), (2, 11)]);
    c.update(&[(1, 11), (2, -1)]);
    c.update(&[(1, 11), (2, 10)]);
    assert_eq!(c.switches, 2);
}
