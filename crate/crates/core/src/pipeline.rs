//! Edge-side orchestration: geofence, calibrate, level, detect, track,
//! georeference, encode. Also the run-level evaluation against ground truth.

use std::collections::HashMap;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::config::{ClockSource, PipelineConfig};
use crate::detect::{ClusterDetector, Detection, Detector, DetectorBackend, OracleDetector};
use crate::eval::{match_pairs, ConfusionCounts, IdSwitchCounter, StageTimings};
use crate::geoloc::{geodetic_to_ecef, georeference_tracks, GeodeticPos, Wgs84Params};
use crate::geometry::{OrientedBox3D, RigidTransform};
use crate::preproc::{apply_transform, estimate_ground_calibration, geofence};
use crate::scene::{AgentState, PointCloudFrame, TruthFrame};
use crate::track::{Track3D, Tracker};
use crate::wire::{encode_frame, stamp_phase, PerceptionMessage, Phase, PhaseStamps, WireFrame};

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage_err(stage: &'static str) -> impl FnOnce(String) -> PipelineError {
    move |message| PipelineError { stage, message }
}

/// Seconds since the Unix epoch from the system clock.
pub fn wall_clock() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Stamp value for `frame_t` under the given clock.
pub fn clock_now(clock: ClockSource, frame_t: f64) -> f64 {
    match clock {
        ClockSource::Wall => wall_clock(),
        ClockSource::Frame => frame_t,
    }
}

/// Re-expresses agent states in another frame.
pub fn transform_agents(agents: &[AgentState], t: &RigidTransform) -> Vec<AgentState> {
    agents
        .iter()
        .map(|a| {
            let b = a.to_box().transformed(t);
            AgentState {
                center: b.center(),
                heading: b.theta,
                ..*a
            }
        })
        .collect()
}

/// Everything one input frame produced.
#[derive(Debug, Clone)]
pub struct EdgeOutput {
    pub bytes: Vec<u8>,
    pub stamps: PhaseStamps,
    pub detections: Vec<Detection>,
    pub tracks: Vec<Track3D>,
    pub messages: Vec<PerceptionMessage>,
    pub timings: StageTimings,
}

pub struct EdgePipeline {
    config: PipelineConfig,
    sensor_pose: RigidTransform,
    p_cali: Option<RigidTransform>,
    p_ecef: RigidTransform,
    wgs: Wgs84Params,
    detector: Box<dyn Detector + Send>,
    tracker: Tracker,
}

impl EdgePipeline {
    /// `p_ecef` maps the sensor frame to ECEF.
    pub fn new(config: &PipelineConfig, p_ecef: RigidTransform) -> Result<Self, PipelineError> {
        let detector: Box<dyn Detector + Send> = match config.detector.backend {
            DetectorBackend::Oracle => Box::new(OracleDetector {
                noise: config.detector.noise,
                region: config.geofence,
                seed: config.seed,
            }),
            DetectorBackend::Cluster => Box::new(ClusterDetector {
                params: config.detector.cluster,
            }),
        };
        let tracker =
            Tracker::new(config.tracker).map_err(|e| stage_err("tracking")(e.to_string()))?;
        Ok(Self {
            config: config.clone(),
            sensor_pose: config.scene.sensor.pose(),
            p_cali: None,
            p_ecef,
            wgs: config.geoloc.wgs(),
            detector,
            tracker,
        })
    }

    /// Calibration in use, once the first frame has been seen.
    pub fn calibration(&self) -> Option<&RigidTransform> {
        self.p_cali.as_ref()
    }

    /// Uses a fixed calibration instead of estimating one.
    pub fn set_calibration(&mut self, p_cali: RigidTransform) {
        self.p_cali = Some(p_cali);
    }

    /// Runs one frame. `truth_world` is required by the oracle backend.
    pub fn process(
        &mut self,
        frame: &PointCloudFrame,
        truth_world: Option<&[AgentState]>,
        t_sensor: f64,
    ) -> Result<EdgeOutput, PipelineError> {
        let clock = self.config.perceive.clock;
        let wire = |e: crate::wire::WireError| stage_err("encoding")(e.to_string());
        let mut stamps =
            stamp_phase(PhaseStamps::default(), Phase::Sensor, t_sensor).map_err(wire)?;
        stamps = stamp_phase(stamps, Phase::EdgeIn, clock_now(clock, frame.t)).map_err(wire)?;
        let mut timings = StageTimings::default();

        let t0 = Instant::now();
        let fenced = geofence(frame, &self.config.geofence);
        let p_cali = match self.p_cali {
            Some(p) => p,
            None => {
                let cal = estimate_ground_calibration(&fenced, &self.config.calibration_params())
                    .map_err(|e| stage_err("calibration")(e.to_string()))?;
                log::info!(
                    "ground calibration: inlier ratio {:.3}, rms {:.4} m",
                    cal.inlier_ratio,
                    cal.rms
                );
                self.p_cali = Some(cal.transform);
                cal.transform
            }
        };
        let frame_h = apply_transform(&fenced, &p_cali)
            .map_err(|e| stage_err("preprocessing")(e.to_string()))?;
        timings.preprocessing = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let truth_h = match (self.config.detector.backend, truth_world) {
            (_, Some(agents)) => transform_agents(agents, &p_cali.compose(&self.sensor_pose)),
            (DetectorBackend::Oracle, None) => {
                return Err(stage_err("detection")(
                    "the oracle backend needs ground truth".into(),
                ));
            }
            (DetectorBackend::Cluster, None) => Vec::new(),
        };
        let detections = self
            .detector
            .detect(&frame_h, &truth_h)
            .map_err(|e| stage_err("detection")(e.to_string()))?;
        timings.detection = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let tracks = self
            .tracker
            .track_frame(frame.t, &detections)
            .map_err(|e| stage_err("tracking")(e.to_string()))?;
        timings.tracking = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let messages = georeference_tracks(&tracks, frame.t, &p_cali, &self.p_ecef, &self.wgs)
            .map_err(|e| stage_err("geolocalization")(e.to_string()))?;
        timings.geolocalization = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        stamps = stamp_phase(stamps, Phase::EdgeOut, clock_now(clock, frame.t)).map_err(wire)?;
        let bytes = encode_frame(frame.t, &messages, &stamps).map_err(wire)?;
        timings.encoding = t0.elapsed().as_secs_f64();

        Ok(EdgeOutput {
            bytes,
            stamps,
            detections,
            tracks,
            messages,
            timings,
        })
    }
}

/// Accuracy of a whole run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunEvaluation {
    pub counts: ConfusionCounts,
    pub id_switches: u64,
    pub frames: usize,
}

/// Message position in the world ENU frame.
pub fn message_to_world(
    m: &PerceptionMessage,
    ecef_to_world: &RigidTransform,
    wgs: &Wgs84Params,
) -> nalgebra::Vector3<f64> {
    let ecef = geodetic_to_ecef(&GeodeticPos::new(m.lat, m.lon, m.alt), wgs);
    ecef_to_world.apply_point(&ecef.to_vector())
}

/// Matches each decoded frame against the truth frame with the same time.
pub fn evaluate_run(
    config: &PipelineConfig,
    truth: &[TruthFrame],
    results: &[WireFrame],
) -> Result<RunEvaluation, PipelineError> {
    let by_t: HashMap<u64, &TruthFrame> = truth.iter().map(|f| (f.frame.t.to_bits(), f)).collect();
    let ecef_to_world = config.world_to_ecef().inverse();
    let wgs = config.geoloc.wgs();
    let mut out = RunEvaluation::default();
    let mut switches = IdSwitchCounter::default();
    for wf in results {
        let tf = by_t.get(&wf.t_frame.to_bits()).ok_or_else(|| {
            stage_err("eval")(format!("no ground-truth frame at t = {}", wf.t_frame))
        })?;
        let gt: Vec<OrientedBox3D> = tf.agents.iter().map(AgentState::to_box).collect();
        let dets: Vec<Detection> = wf
            .messages
            .iter()
            .map(|m| {
                let p = message_to_world(m, &ecef_to_world, &wgs);
                Detection {
                    bbox: OrientedBox3D {
                        x: p.x,
                        y: p.y,
                        z: p.z,
                        w: m.w as f64,
                        l: m.l as f64,
                        h: m.h as f64,
                        theta: 0.0,
                    },
                    class: crate::geometry::ObjectClass::Vehicle,
                    score: 1.0,
                }
            })
            .collect();
        let (c, pairs) = match_pairs(&gt, &dets, config.eval.match_threshold)
            .map_err(|e| stage_err("eval")(e.to_string()))?;
        let id_pairs: Vec<(i64, i64)> = pairs
            .iter()
            .map(|&(g, d)| (tf.agents[g].agent_id as i64, wf.messages[d].id as i64))
            .collect();
        switches.update(&id_pairs);
        out.counts += c;
        out.frames += 1;
    }
    out.id_switches = switches.switches;
    Ok(out)
}
