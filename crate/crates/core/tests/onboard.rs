use std::path::PathBuf;

use cmm_core::config::PipelineConfig;
use cmm_core::geoloc::GeodeticPos;
use cmm_core::geometry::ObjectClass;
use cmm_core::onboard::{
    build_pixel_map, classify_by_size, emit_render, gps_to_pixel, reconstruct_frame, render_svg,
    EgoState, IconKind, PixelMap, Viewport,
};
use cmm_core::wire::PerceptionMessage;
use proptest::prelude::*;

const R: f64 = 6_378_137.0;

/// Two-point linear interpolation per axis. With the scale latitude fixed at
/// the first reference, the cosine factor cancels out of the ratios.
fn oracle_pixel(a: GeodeticPos, pa: [f64; 2], b: GeodeticPos, pb: [f64; 2], g: GeodeticPos) -> [f64; 2] {
    let fx = (g.lon - a.lon) / (b.lon - a.lon);
    let fy = (g.lat - a.lat) / (b.lat - a.lat);
    [pa[0] + fx * (pb[0] - pa[0]), pa[1] + fy * (pb[1] - pa[1])]
}

fn default_map() -> (PipelineConfig, PixelMap) {
    let cfg = PipelineConfig::default();
    let map = cfg.pixel_map().unwrap();
    (cfg, map)
}

fn ego_at(lat: f64, lon: f64) -> EgoState {
    EgoState {
        gps: GeodeticPos::new(lat, lon, 300.0),
        heading: 45.0,
        t: 2.0,
    }
}

fn msg(id: i32, lat: f64, lon: f64, dims: [f32; 3]) -> PerceptionMessage {
    PerceptionMessage {
        t: 2.0,
        id,
        lat,
        lon,
        alt: 300.0,
        w: dims[0],
        l: dims[1],
        h: dims[2],
        theta: 90.0,
    }
}

#[test]
fn unit_ratio_map() {
    let a = GeodeticPos::new(0.0, 0.0, 0.0);
    let dlat = (100.0 / R).to_degrees();
    let b = GeodeticPos::new(dlat, dlat, 0.0);
    let map = build_pixel_map(a, [0.0, 200.0], b, [100.0, 100.0]).unwrap();
    assert!((map.px_per_m_x - 1.0).abs() < 1e-12);
    assert!((map.px_per_m_y - 1.0).abs() < 1e-12);
    assert!((map.meters_per_pixel_x() - 1.0).abs() < 1e-12);
}

#[test]
fn coincident_references_are_degenerate() {
    let a = GeodeticPos::new(34.0, -117.0, 0.0);
    assert!(build_pixel_map(a, [0.0, 0.0], GeodeticPos::new(34.0, -116.9, 0.0), [10.0, 10.0]).is_err());
    assert!(build_pixel_map(a, [0.0, 0.0], GeodeticPos::new(34.1, -117.0, 0.0), [10.0, 10.0]).is_err());
    assert!(build_pixel_map(a, [0.0, 0.0], GeodeticPos::new(34.1, -116.9, 0.0), [0.0, 10.0]).is_err());
}

#[test]
fn anchors_map_to_their_pixels() {
    let (_, map) = default_map();
    for (g, p) in [(map.ref_a_gps, map.ref_a_px), (map.ref_b_gps, map.ref_b_px)] {
        let q = gps_to_pixel(&map, &g);
        assert!((q[0] - p[0]).hypot(q[1] - p[1]) < 1.0, "{q:?} vs {p:?}");
    }
}

#[test]
fn midpoint_maps_to_midpoint_pixel() {
    let a = GeodeticPos::new(33.9755, -117.3395, 0.0);
    let b = GeodeticPos::new(33.9765, -117.3381, 0.0);
    let (pa, pb) = ([10.0, 900.0], [850.0, 40.0]);
    let map = build_pixel_map(a, pa, b, pb).unwrap();
    let mid = GeodeticPos::new((a.lat + b.lat) / 2.0, (a.lon + b.lon) / 2.0, 0.0);
    let q = gps_to_pixel(&map, &mid);
    assert!((q[0] - 430.0).hypot(q[1] - 470.0) < 1.0, "{q:?}");
}

#[test]
fn random_points_match_oracle_within_a_pixel() {
    use rand::{Rng, SeedableRng};
    let (cfg, map) = default_map();
    let o = cfg.scene.origin.geodetic();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let m_lat = (1.0 / R).to_degrees();
    let m_lon = m_lat / o.lat.to_radians().cos();
    for _ in 0..1000 {
        let e: f64 = rng.random_range(-51.2..51.2);
        let n: f64 = rng.random_range(-51.2..51.2);
        let g = GeodeticPos::new(o.lat + n * m_lat, o.lon + e * m_lon, 300.0);
        let q = gps_to_pixel(&map, &g);
        let p = oracle_pixel(map.ref_a_gps, map.ref_a_px, map.ref_b_gps, map.ref_b_px, g);
        assert!((q[0] - p[0]).hypot(q[1] - p[1]) < 1.0, "{q:?} vs {p:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn colinear_gps_maps_to_colinear_pixels(
        e0 in -50.0..50.0f64, n0 in -50.0..50.0f64,
        e1 in -50.0..50.0f64, n1 in -50.0..50.0f64,
        s in 0.0..1.0f64,
    ) {
        let (cfg, map) = default_map();
        let o = cfg.scene.origin.geodetic();
        let to_g = |e: f64, n: f64| {
            let lat = o.lat + (n / R).to_degrees();
            GeodeticPos::new(lat, o.lon + (e / (R * o.lat.to_radians().cos())).to_degrees(), 0.0)
        };
        let p0 = gps_to_pixel(&map, &to_g(e0, n0));
        let p1 = gps_to_pixel(&map, &to_g(e1, n1));
        let pm = gps_to_pixel(&map, &to_g(e0 + s * (e1 - e0), n0 + s * (n1 - n0)));
        let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
        let len = dx.hypot(dy);
        if len > 1e-6 {
            let dist = ((pm[0] - p0[0]) * dy - (pm[1] - p0[1]) * dx).abs() / len;
            prop_assert!(dist < 1.0, "off-line by {}", dist);
        }
    }

    #[test]
    fn classification_is_the_stated_predicate(w in 0.01..4.0f64, l in 0.01..4.0f64, h in 0.01..4.0f64) {
        let want = if w.max(l) < 1.2 && h < 2.2 { ObjectClass::Pedestrian } else { ObjectClass::Vehicle };
        for _ in 0..3 {
            prop_assert_eq!(classify_by_size(w, l, h).unwrap(), want);
        }
    }

    #[test]
    fn icon_bookkeeping_identity(offsets in proptest::collection::vec((-120.0..120.0f64, -120.0..120.0f64), 0..30)) {
        let (cfg, map) = default_map();
        let o = cfg.scene.origin.geodetic();
        let ego = ego_at(o.lat, o.lon);
        let msgs: Vec<_> = offsets
            .iter()
            .enumerate()
            .map(|(k, &(e, n))| {
                msg(k as i32, o.lat + (n / R).to_degrees(), o.lon + (e / (R * o.lat.to_radians().cos())).to_degrees(), [1.9, 4.6, 1.6])
            })
            .collect();
        let f = reconstruct_frame(&msgs, &ego, &map, &Viewport::default());
        prop_assert_eq!(f.icons.len(), msgs.len() - f.suppressed - f.out_of_view + 1);
        prop_assert_eq!(f.icons.iter().filter(|i| i.kind == IconKind::Ego).count(), 1);
    }
}

#[test]
fn classification_boundaries() {
    assert_eq!(classify_by_size(0.6, 0.6, 1.7).unwrap(), ObjectClass::Pedestrian);
    assert_eq!(classify_by_size(1.9, 4.6, 1.6).unwrap(), ObjectClass::Vehicle);
    assert_eq!(classify_by_size(1.2, 0.5, 1.7).unwrap(), ObjectClass::Vehicle);
    assert_eq!(classify_by_size(0.5, 1.1999, 2.1999).unwrap(), ObjectClass::Pedestrian);
    assert_eq!(classify_by_size(0.5, 0.5, 2.2).unwrap(), ObjectClass::Vehicle);
    assert!(classify_by_size(0.0, 1.0, 1.0).is_err());
    assert!(classify_by_size(1.0, 1.0, -1.0).is_err());
}

#[test]
fn reconstruct_examples() {
    let (cfg, map) = default_map();
    let o = cfg.scene.origin.geodetic();
    let ego = ego_at(o.lat, o.lon);
    let vp = Viewport::default();

    let empty = reconstruct_frame(&[], &ego, &map, &vp);
    assert_eq!(empty.icons.len(), 1);
    assert_eq!(empty.icons[0].kind, IconKind::Ego);

    let north = msg(3, o.lat + (20.0 / R).to_degrees(), o.lon, [1.9, 4.6, 1.6]);
    let f = reconstruct_frame(&[north], &ego, &map, &vp);
    assert_eq!(f.icons.len(), 2);
    let want = oracle_pixel(map.ref_a_gps, map.ref_a_px, map.ref_b_gps, map.ref_b_px, GeodeticPos::new(north.lat, north.lon, 0.0));
    let got = f.icons[1].px;
    assert!((got[0] - want[0]).hypot(got[1] - want[1]) < 1.0);
    assert_eq!((f.icons[1].kind, f.icons[1].id), (IconKind::Vehicle, Some(3)));
    // 20 m north is 20 * px_per_m_y pixels up
    assert!((f.icons[0].px[1] - got[1] - 20.0 * map.px_per_m_y).abs() < 1e-6);

    let me = msg(4, o.lat, o.lon, [1.9, 4.6, 1.6]);
    let f = reconstruct_frame(&[me], &ego, &map, &vp);
    assert_eq!(f.icons.len(), 1);
    assert_eq!(f.suppressed, 1);
}

fn scripted_frame() -> (cmm_core::onboard::RenderFrame, PixelMap) {
    let (cfg, map) = default_map();
    let o = cfg.scene.origin.geodetic();
    let m_lat = (1.0 / R).to_degrees();
    let m_lon = m_lat / o.lat.to_radians().cos();
    let ego = ego_at(o.lat - 10.0 * m_lat, o.lon - 3.0 * m_lon);
    let msgs = [
        msg(1, o.lat + 15.0 * m_lat, o.lon + 4.0 * m_lon, [1.9, 4.6, 1.6]),
        msg(2, o.lat - 8.0 * m_lat, o.lon + 12.0 * m_lon, [0.6, 0.5, 1.7]),
    ];
    (reconstruct_frame(&msgs, &ego, &map, &Viewport::default()), map)
}

#[test]
fn render_has_one_shape_per_icon_and_is_deterministic() {
    let (f, map) = scripted_frame();
    assert_eq!(f.icons.len(), 3);
    let a = render_svg(&f, &map, &Viewport::default());
    let b = render_svg(&f.clone(), &map, &Viewport::default());
    assert_eq!(a, b);
    let shapes = a.matches("<rect").count() + a.matches("<circle").count();
    // plus the background rect
    assert_eq!(shapes, 3 + 1);
    assert!(a.contains(">1<") && a.contains(">2<"));
}

#[test]
fn render_matches_golden_file() {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/render_scripted.svg");
    let (f, map) = scripted_frame();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.svg");
    emit_render(&f, &map, &Viewport::default(), &out).unwrap();
    let got = std::fs::read_to_string(&out).unwrap();
    if std::env::var_os("CMM_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden file; regenerate with CMM_UPDATE_GOLDEN=1");
    assert_eq!(got, want);
}
