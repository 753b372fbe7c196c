//! Pipeline configuration shared by every subcommand.
//!
//! One TOML document, every key optional, unknown keys rejected. The
//! documented defaults live in `config/reference.toml` at the workspace root.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::detect::{ClusterParams, DetectorBackend, OracleNoise};
use crate::geoloc::{enu_to_ecef_transform, GeodeticPos, Wgs84Params};
use crate::geometry::{ObjectClass, RigidTransform};
use crate::onboard::{PixelMap, Viewport};
use crate::preproc::{CalibrationParams, GeofenceBounds, DEFAULT_MOUNT_HEIGHT};
use crate::scene::{AgentSpec, ScenarioConfig, AREA_HALF_SIDE};
use crate::track::TrackerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config key `{path}`: {message}")]
    Key { path: String, message: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn key_err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        path: path.into(),
        message: message.into(),
    }
}

/// Drops a leading "invalid ...: " wrapper from an error message.
fn inner_message(m: &str) -> String {
    m.rsplit_once(": ").map_or(m, |(_, tail)| tail).to_string()
}

/// Section-level error whose message opens with the offending field name.
fn field_err(section: &str, message: String) -> ConfigError {
    let field: String = message
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
        .collect();
    if field.contains('_') {
        key_err(&format!("{section}.{field}"), message)
    } else {
        key_err(section, message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub scene: SceneSection,
    pub geofence: GeofenceBounds,
    pub calibration: CalibrationSection,
    pub detector: DetectorSection,
    pub tracker: TrackerConfig,
    pub geoloc: GeolocSection,
    pub perceive: PerceiveSection,
    pub relay: RelaySection,
    pub onboard: OnboardSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneSection::default(),
            geofence: GeofenceBounds::default(),
            calibration: CalibrationSection::default(),
            detector: DetectorSection::default(),
            tracker: TrackerConfig::default(),
            geoloc: GeolocSection::default(),
            perceive: PerceiveSection::default(),
            relay: RelaySection::default(),
            onboard: OnboardSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub id: i32,
    pub class: ObjectClass,
    /// Width, length, height in meters.
    pub dims: [f64; 3],
    /// Meters per second along the route.
    pub speed: f64,
    /// World ENU waypoints; the first is the spawn point.
    pub route: Vec<[f64; 2]>,
}

/// Sensor mounting in the world frame. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorMount {
    pub height: f64,
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
}

impl Default for SensorMount {
    fn default() -> Self {
        Self {
            height: DEFAULT_MOUNT_HEIGHT,
            roll_deg: 0.5,
            pitch_deg: 1.0,
            yaw_deg: 0.0,
        }
    }
}

impl SensorMount {
    /// World to sensor frame.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_euler(
            self.roll_deg.to_radians(),
            self.pitch_deg.to_radians(),
            self.yaw_deg.to_radians(),
            Vector3::new(0.0, 0.0, self.height),
        )
        .inverse()
    }
}

/// Geodetic position of the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OriginEntry {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl Default for OriginEntry {
    fn default() -> Self {
        Self {
            lat: 33.9755,
            lon: -117.3395,
            alt: 300.0,
        }
    }
}

impl OriginEntry {
    pub fn geodetic(&self) -> GeodeticPos {
        GeodeticPos::new(self.lat, self.lon, self.alt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub duration: f64,
    pub tick: f64,
    pub points_per_agent: usize,
    /// Ground returns per square meter.
    pub ground_point_density: f64,
    pub sensor: SensorMount,
    pub origin: OriginEntry,
    pub agents: Vec<AgentEntry>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            duration: 10.0,
            tick: 0.1,
            points_per_agent: 400,
            ground_point_density: 0.5,
            sensor: SensorMount::default(),
            origin: OriginEntry::default(),
            agents: default_agents(),
        }
    }
}

/// Four vehicles and two pedestrians on routes that never bring two agents
/// within a few meters of each other.
pub fn default_agents() -> Vec<AgentEntry> {
    let v = ObjectClass::Vehicle;
    let p = ObjectClass::Pedestrian;
    vec![
        AgentEntry {
            id: 1,
            class: v,
            dims: [1.9, 4.6, 1.6],
            speed: 8.0,
            route: vec![[-45.0, -3.5], [45.0, -3.5]],
        },
        AgentEntry {
            id: 2,
            class: v,
            dims: [2.0, 5.2, 1.9],
            speed: 6.0,
            route: vec![[45.0, 3.5], [-45.0, 3.5]],
        },
        AgentEntry {
            id: 3,
            class: v,
            dims: [2.5, 10.0, 3.5],
            speed: 5.0,
            route: vec![[-20.0, -45.0], [-20.0, 45.0]],
        },
        AgentEntry {
            id: 4,
            class: v,
            dims: [1.8, 4.4, 1.5],
            speed: 5.0,
            route: vec![[30.0, -45.0], [30.0, -12.0], [45.0, -12.0]],
        },
        AgentEntry {
            id: 5,
            class: p,
            dims: [0.6, 0.6, 1.7],
            speed: 1.4,
            route: vec![[-8.0, 15.0], [-8.0, 40.0]],
        },
        AgentEntry {
            id: 6,
            class: p,
            dims: [0.5, 0.7, 1.8],
            speed: 1.2,
            route: vec![[12.0, 20.0], [40.0, 20.0]],
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub mount_height: f64,
    pub stratum_fraction: f64,
    pub inlier_threshold: f64,
    pub iterations: usize,
    pub min_inlier_ratio: f64,
    pub min_points: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let c = CalibrationParams::default();
        Self {
            mount_height: c.mount_height,
            stratum_fraction: c.stratum_fraction,
            inlier_threshold: c.inlier_threshold,
            iterations: c.iterations,
            min_inlier_ratio: c.min_inlier_ratio,
            min_points: c.min_points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub backend: DetectorBackend,
    pub noise: OracleNoise,
    pub cluster: ClusterParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeolocSection {
    /// GCP correspondences for the sensor-to-ECEF fit. Empty means the
    /// transform is derived from `scene.sensor` and `scene.origin`.
    pub gcp_file: String,
    pub semi_major_axis: f64,
    pub flattening: f64,
}

impl Default for GeolocSection {
    fn default() -> Self {
        let w = Wgs84Params::default();
        Self {
            gcp_file: String::new(),
            semi_major_axis: w.a,
            flattening: w.f,
        }
    }
}

impl GeolocSection {
    pub fn wgs(&self) -> Wgs84Params {
        Wgs84Params::new(self.semi_major_axis, self.flattening)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockSource {
    /// Stamps come from the system clock.
    #[default]
    Wall,
    /// Every stamp equals the frame time; output is reproducible.
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PerceiveSection {
    pub clock: ClockSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaySection {
    pub bind: String,
    pub max_subscribers: usize,
    pub queue_len: usize,
}

impl Default for RelaySection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7700".into(),
            max_subscribers: 16,
            queue_len: crate::wire::relay::SUBSCRIBER_QUEUE,
        }
    }
}

/// One GPS/pixel anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorEntry {
    pub lat: f64,
    pub lon: f64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnboardSection {
    pub connect: String,
    /// Scenario agent that plays the ego vehicle.
    pub ego_agent: i32,
    /// Ego GPS noise, meters (1 sigma).
    pub gps_sigma: f64,
    pub viewport: Viewport,
    /// When both are absent the anchors are placed at the corners of the
    /// surveillance square.
    pub ref_a: Option<AnchorEntry>,
    pub ref_b: Option<AnchorEntry>,
}

impl Default for OnboardSection {
    fn default() -> Self {
        Self {
            connect: "127.0.0.1:7700".into(),
            ego_agent: 1,
            gps_sigma: 0.3,
            viewport: Viewport::default(),
            ref_a: None,
            ref_b: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub match_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            match_threshold: crate::eval::DEFAULT_MATCH_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            key_err(&path, inner.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario()?
            .validate()
            .map_err(|e| key_err("scene", e.to_string()))?;
        self.geofence
            .validate()
            .map_err(|e| field_err("geofence", inner_message(&e.to_string())))?;
        let c = &self.calibration;
        if !(c.mount_height > 0.0) {
            return Err(key_err("calibration.mount_height", "must be positive"));
        }
        if !(c.stratum_fraction > 0.0 && c.stratum_fraction <= 1.0) {
            return Err(key_err(
                "calibration.stratum_fraction",
                "must lie in (0, 1]",
            ));
        }
        if !(c.inlier_threshold > 0.0) {
            return Err(key_err("calibration.inlier_threshold", "must be positive"));
        }
        if c.iterations == 0 {
            return Err(key_err("calibration.iterations", "must be positive"));
        }
        self.detector
            .noise
            .validate()
            .map_err(|e| key_err("detector.noise", e.to_string()))?;
        let cl = &self.detector.cluster;
        if !(cl.voxel > 0.0) {
            return Err(key_err("detector.cluster.voxel", "must be positive"));
        }
        self.tracker
            .validate()
            .map_err(|e| field_err("tracker", inner_message(&e.to_string())))?;
        let g = &self.geoloc;
        if !(g.semi_major_axis > 0.0) {
            return Err(key_err("geoloc.semi_major_axis", "must be positive"));
        }
        if !(g.flattening >= 0.0 && g.flattening < 1.0) {
            return Err(key_err("geoloc.flattening", "must lie in [0, 1)"));
        }
        let o = &self.scene.origin;
        if !(-90.0..=90.0).contains(&o.lat) || !(-180.0..=180.0).contains(&o.lon) {
            return Err(key_err("scene.origin", "lat/lon out of range"));
        }
        if self.relay.max_subscribers == 0 {
            return Err(key_err("relay.max_subscribers", "must be positive"));
        }
        if self.relay.queue_len == 0 {
            return Err(key_err("relay.queue_len", "must be positive"));
        }
        let ob = &self.onboard;
        if !(ob.gps_sigma >= 0.0) {
            return Err(key_err("onboard.gps_sigma", "must be non-negative"));
        }
        if !(ob.viewport.width > 0.0 && ob.viewport.height > 0.0) {
            return Err(key_err(
                "onboard.viewport",
                "width and height must be positive",
            ));
        }
        if ob.ref_a.is_some() != ob.ref_b.is_some() {
            return Err(key_err(
                "onboard.ref_a",
                "ref_a and ref_b must be given together",
            ));
        }
        if !self.scene.agents.iter().any(|a| a.id == ob.ego_agent) {
            return Err(key_err(
                "onboard.ego_agent",
                format!("no scene agent with id {}", ob.ego_agent),
            ));
        }
        self.pixel_map()
            .map_err(|e| key_err("onboard.ref_a", e.to_string()))?;
        if !(self.eval.match_threshold > 0.0) {
            return Err(key_err("eval.match_threshold", "must be positive"));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<ScenarioConfig, ConfigError> {
        let s = &self.scene;
        Ok(ScenarioConfig {
            agents: s
                .agents
                .iter()
                .map(|a| AgentSpec {
                    agent_id: a.id,
                    class: a.class,
                    dims: a.dims,
                    route: a.route.clone(),
                    speed: a.speed,
                })
                .collect(),
            duration: s.duration,
            tick: s.tick,
            sensor_pose: s.sensor.pose(),
            points_per_agent: s.points_per_agent,
            ground_point_density: s.ground_point_density,
            rng_seed: self.seed,
        })
    }

    pub fn calibration_params(&self) -> CalibrationParams {
        let c = &self.calibration;
        CalibrationParams {
            mount_height: c.mount_height,
            stratum_fraction: c.stratum_fraction,
            inlier_threshold: c.inlier_threshold,
            iterations: c.iterations,
            min_inlier_ratio: c.min_inlier_ratio,
            min_points: c.min_points,
            seed: self.seed,
        }
    }

    /// World ENU to ECEF about the scene origin.
    pub fn world_to_ecef(&self) -> RigidTransform {
        enu_to_ecef_transform(&self.scene.origin.geodetic(), &self.geoloc.wgs())
    }

    /// Sensor frame to ECEF implied by the configured mounting.
    pub fn surveyed_sensor_to_ecef(&self) -> RigidTransform {
        self.world_to_ecef()
            .compose(&self.scene.sensor.pose().inverse())
    }

    pub fn pixel_map(&self) -> Result<PixelMap, crate::onboard::OnboardError> {
        let (a, b) = match (self.onboard.ref_a, self.onboard.ref_b) {
            (Some(a), Some(b)) => (a, b),
            _ => self.default_anchors(),
        };
        crate::onboard::build_pixel_map(
            GeodeticPos::new(a.lat, a.lon, 0.0),
            [a.u, a.v],
            GeodeticPos::new(b.lat, b.lon, 0.0),
            [b.u, b.v],
        )
    }

    /// South-west and north-east corners of the surveillance square, mapped
    /// to the bottom-left and top-right viewport corners.
    pub fn default_anchors(&self) -> (AnchorEntry, AnchorEntry) {
        let o = self.scene.origin;
        let r = crate::onboard::PROJECTION_RADIUS;
        let dlat = (AREA_HALF_SIDE / r).to_degrees();
        // east scale is taken at ref_a's latitude, as the map does
        let dlon = (AREA_HALF_SIDE / (r * (o.lat - dlat).to_radians().cos())).to_degrees();
        let vp = self.onboard.viewport;
        (
            AnchorEntry {
                lat: o.lat - dlat,
                lon: o.lon - dlon,
                u: 0.0,
                v: vp.height,
            },
            AnchorEntry {
                lat: o.lat + dlat,
                lon: o.lon + dlon,
                u: vp.width,
                v: 0.0,
            },
        )
    }
}
