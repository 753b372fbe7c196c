//! Object-level scene reconstruction on the vehicle side.
//!
//! Positions are placed on a north-up raster through a linear map anchored
//! at two GPS/pixel reference pairs. Local meters come from an
//! equirectangular projection about the first reference, which is accurate
//! well below a meter at intersection scale.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geoloc::{ecef_to_geodetic, enu_to_ecef_transform, EcefPos, GeodeticPos, Wgs84Params};
use crate::geometry::{normalize_degrees_360, ObjectClass};
use crate::scene::{step_scenario, ScenarioConfig};
use crate::wire::PerceptionMessage;

/// Earth radius used for the equirectangular projection (WGS84 semi-major axis).
pub const PROJECTION_RADIUS: f64 = 6_378_137.0;
pub const PEDESTRIAN_MAX_FOOTPRINT: f64 = 1.2;
pub const PEDESTRIAN_MAX_HEIGHT: f64 = 2.2;
pub const EGO_SUPPRESSION_RADIUS: f64 = 2.0;
pub const EGO_GPS_RATE_HZ: f64 = 8.0;

#[derive(Debug, thiserror::Error)]
pub enum OnboardError {
    #[error("degenerate pixel map: {0}")]
    DegenerateMap(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Two-anchor GPS-to-pixel map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMap {
    pub ref_a_gps: GeodeticPos,
    pub ref_b_gps: GeodeticPos,
    pub ref_a_px: [f64; 2],
    pub ref_b_px: [f64; 2],
    /// Pixels per meter east.
    pub px_per_m_x: f64,
    /// Pixels per meter north; positive for a north-up image.
    pub px_per_m_y: f64,
}

/// East/north meters of `g` relative to `origin`.
pub fn equirectangular_en(origin: &GeodeticPos, g: &GeodeticPos) -> [f64; 2] {
    let east =
        PROJECTION_RADIUS * origin.lat.to_radians().cos() * (g.lon - origin.lon).to_radians();
    let north = PROJECTION_RADIUS * (g.lat - origin.lat).to_radians();
    [east, north]
}

pub fn build_pixel_map(
    ref_a_gps: GeodeticPos,
    ref_a_px: [f64; 2],
    ref_b_gps: GeodeticPos,
    ref_b_px: [f64; 2],
) -> Result<PixelMap, OnboardError> {
    let [de, dn] = equirectangular_en(&ref_a_gps, &ref_b_gps);
    let du = ref_b_px[0] - ref_a_px[0];
    let dv = ref_b_px[1] - ref_a_px[1];
    if de.abs() < 1e-6 || dn.abs() < 1e-6 {
        return Err(OnboardError::DegenerateMap(format!(
            "reference points must differ in latitude and longitude (Δeast {de:.3e} m, Δnorth {dn:.3e} m)"
        )));
    }
    if du == 0.0 || dv == 0.0 {
        return Err(OnboardError::DegenerateMap(format!(
            "reference pixels must differ on both axes (Δu {du}, Δv {dv})"
        )));
    }
    let px_per_m_x = du / de;
    let px_per_m_y = -dv / dn;
    if !(px_per_m_x.is_finite() && px_per_m_y.is_finite()) {
        return Err(OnboardError::DegenerateMap(
            "non-finite transfer ratio".into(),
        ));
    }
    Ok(PixelMap {
        ref_a_gps,
        ref_b_gps,
        ref_a_px,
        ref_b_px,
        px_per_m_x,
        px_per_m_y,
    })
}

impl PixelMap {
    pub fn meters_per_pixel_x(&self) -> f64 {
        1.0 / self.px_per_m_x
    }

    pub fn meters_per_pixel_y(&self) -> f64 {
        1.0 / self.px_per_m_y
    }

    pub fn en_to_pixel(&self, en: [f64; 2]) -> [f64; 2] {
        [
            self.ref_a_px[0] + self.px_per_m_x * en[0],
            self.ref_a_px[1] - self.px_per_m_y * en[1],
        ]
    }
}

pub fn gps_to_pixel(map: &PixelMap, g: &GeodeticPos) -> [f64; 2] {
    map.en_to_pixel(equirectangular_en(&map.ref_a_gps, g))
}

pub fn classify_by_size(w: f64, l: f64, h: f64) -> Result<ObjectClass, OnboardError> {
    if !(w > 0.0 && l > 0.0 && h > 0.0) {
        return Err(OnboardError::Domain(format!(
            "dims must be positive: {w} {l} {h}"
        )));
    }
    Ok(
        if w.max(l) < PEDESTRIAN_MAX_FOOTPRINT && h < PEDESTRIAN_MAX_HEIGHT {
            ObjectClass::Pedestrian
        } else {
            ObjectClass::Vehicle
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub gps: GeodeticPos,
    /// Degrees clockwise from north, in [0, 360).
    pub heading: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IconKind {
    Ego,
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Icon {
    pub kind: IconKind,
    pub px: [f64; 2],
    pub heading_deg: f64,
    /// Width, length, height in meters.
    pub dims_m: [f64; 3],
    /// `None` for the ego icon.
    pub id: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderFrame {
    pub t: f64,
    /// Ego first, then messages in input order.
    pub icons: Vec<Icon>,
    pub suppressed: usize,
    pub out_of_view: usize,
}

/// Visible raster size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Viewport {
    pub width: f64,
    pub height: f64,
}

impl Default for Viewport {
    fn default() -> Self {
        Self {
            width: 1024.0,
            height: 1024.0,
        }
    }
}

impl Viewport {
    pub fn contains(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] < self.width && px[1] >= 0.0 && px[1] < self.height
    }
}

/// Default ego footprint drawn on the render.
pub const EGO_DIMS: [f64; 3] = [1.9, 4.6, 1.6];

/// Builds one render frame. The ego icon is always present, even when the
/// ego itself is outside the viewport.
pub fn reconstruct_frame(
    msgs: &[PerceptionMessage],
    ego: &EgoState,
    map: &PixelMap,
    viewport: &Viewport,
) -> RenderFrame {
    let mut icons = vec![Icon {
        kind: IconKind::Ego,
        px: gps_to_pixel(map, &ego.gps),
        heading_deg: ego.heading,
        dims_m: EGO_DIMS,
        id: None,
    }];
    let mut suppressed = 0;
    let mut out_of_view = 0;
    for m in msgs {
        let g = GeodeticPos::new(m.lat, m.lon, m.alt);
        let [de, dn] = equirectangular_en(&ego.gps, &g);
        if de.hypot(dn) <= EGO_SUPPRESSION_RADIUS {
            suppressed += 1;
            continue;
        }
        let px = gps_to_pixel(map, &g);
        if !viewport.contains(px) {
            out_of_view += 1;
            continue;
        }
        let (w, l, h) = (m.w as f64, m.l as f64, m.h as f64);
        let kind = match classify_by_size(w, l, h) {
            Ok(ObjectClass::Pedestrian) => IconKind::Pedestrian,
            _ => IconKind::Vehicle,
        };
        icons.push(Icon {
            kind,
            px,
            heading_deg: m.theta as f64,
            dims_m: [w, l, h],
            id: Some(m.id),
        });
    }
    RenderFrame {
        t: ego.t.max(msgs.first().map_or(f64::NEG_INFINITY, |m| m.t)),
        icons,
        suppressed,
        out_of_view,
    }
}

/// Serializes a render frame as SVG. Output depends only on its inputs.
pub fn render_svg(frame: &RenderFrame, map: &PixelMap, viewport: &Viewport) -> String {
    let sx = map.px_per_m_x.abs();
    let sy = map.px_per_m_y.abs();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-t="{t:.3}">"#,
        w = viewport.width,
        h = viewport.height,
        t = frame.t
    );
    let _ = writeln!(
        s,
        r##"<rect class="background" x="0" y="0" width="{}" height="{}" fill="#2b2b2b"/>"##,
        viewport.width, viewport.height
    );
    for icon in &frame.icons {
        let [u, v] = icon.px;
        let _ = write!(
            s,
            r#"<g transform="translate({u:.2} {v:.2}) rotate({:.2})">"#,
            icon.heading_deg
        );
        match icon.kind {
            IconKind::Ego | IconKind::Vehicle => {
                let fill = if icon.kind == IconKind::Ego {
                    "#ff8c00"
                } else {
                    "#1e64ff"
                };
                let w = icon.dims_m[0] * sx;
                let l = icon.dims_m[1] * sy;
                let _ = write!(
                    s,
                    r#"<rect class="{}" x="{:.2}" y="{:.2}" width="{w:.2}" height="{l:.2}" fill="{fill}"/>"#,
                    if icon.kind == IconKind::Ego {
                        "ego"
                    } else {
                        "vehicle"
                    },
                    -w / 2.0,
                    -l / 2.0
                );
            }
            IconKind::Pedestrian => {
                let r = 0.5 * icon.dims_m[0].max(icon.dims_m[1]) * sx.max(sy);
                let _ = write!(
                    s,
                    r##"<circle class="pedestrian" cx="0" cy="0" r="{r:.2}" fill="#f0f0f0"/>"##
                );
            }
        }
        s.push_str("</g>");
        let label = icon
            .id
            .map_or_else(|| "ego".to_string(), |id| id.to_string());
        let _ = writeln!(
            s,
            r##"<text x="{u:.2}" y="{:.2}" font-size="10" fill="#ffffff">{label}</text>"##,
            v - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_render(
    frame: &RenderFrame,
    map: &PixelMap,
    viewport: &Viewport,
    path: impl AsRef<Path>,
) -> Result<(), OnboardError> {
    std::fs::write(path, render_svg(frame, map, viewport))?;
    Ok(())
}

/// Simulated ego GPS: a scenario agent sampled at a fixed rate with
/// Gaussian position noise in meters.
#[derive(Debug, Clone)]
pub struct EgoGpsSimulator {
    scenario: ScenarioConfig,
    agent_id: i32,
    origin: GeodeticPos,
    wgs: Wgs84Params,
    sigma_m: f64,
    seed: u64,
    rate_hz: f64,
}

impl EgoGpsSimulator {
    pub fn new(
        scenario: ScenarioConfig,
        agent_id: i32,
        origin: GeodeticPos,
        sigma_m: f64,
        seed: u64,
    ) -> Result<Self, OnboardError> {
        if !scenario.agents.iter().any(|a| a.agent_id == agent_id) {
            return Err(OnboardError::Domain(format!(
                "no agent with id {agent_id} in the scenario"
            )));
        }
        if !(sigma_m >= 0.0 && sigma_m.is_finite()) {
            return Err(OnboardError::Domain(format!(
                "GPS noise sigma {sigma_m} must be non-negative"
            )));
        }
        Ok(Self {
            scenario,
            agent_id,
            origin,
            wgs: Wgs84Params::default(),
            sigma_m,
            seed,
            rate_hz: EGO_GPS_RATE_HZ,
        })
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// The `k`-th fix, taken at `k / rate` seconds.
    pub fn sample(&self, k: u64) -> Result<EgoState, OnboardError> {
        let t = (k as f64 / self.rate_hz).min(self.scenario.duration);
        let agents =
            step_scenario(&self.scenario, t).map_err(|e| OnboardError::Domain(e.to_string()))?;
        let a = agents
            .iter()
            .find(|a| a.agent_id == self.agent_id)
            .expect("agent presence checked at construction");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = Normal::new(0.0, self.sigma_m).expect("sigma validated");
        let enu = nalgebra::Vector3::new(
            a.center.x + noise.sample(&mut rng),
            a.center.y + noise.sample(&mut rng),
            0.0,
        );
        let ecef = enu_to_ecef_transform(&self.origin, &self.wgs).apply_point(&enu);
        let gps = ecef_to_geodetic(&EcefPos::from_vector(&ecef), &self.wgs)
            .map_err(|e| OnboardError::Domain(e.to_string()))?;
        let heading = normalize_degrees_360(90.0 - a.heading.to_degrees());
        Ok(EgoState { gps, heading, t })
    }

    /// Latest fix taken at or before `t`.
    pub fn latest_at(&self, t: f64) -> Result<EgoState, OnboardError> {
        let k = (t.max(0.0) * self.rate_hz + 1e-9).floor() as u64;
        self.sample(k)
    }
}
