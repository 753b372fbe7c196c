//! Synthetic intersection traffic and point-cloud sampling.
//!
//! The world frame is East-North-Up meters with its origin on the ground
//! directly below the sensor. Agents move along polyline routes at constant
//! speed; each frame samples points on every agent's box surface plus a flat
//! ground plane, then expresses them in the tilted sensor frame (L-Coor).

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{normalize_angle, ObjectClass, OrientedBox3D, RigidTransform};

/// Half side of the square surveillance area, meters.
pub const AREA_HALF_SIDE: f64 = 51.2;

pub const FRAME_MAGIC: &[u8; 4] = b"CMMF";
pub const TRUTH_MAGIC: &[u8; 4] = b"CMMG";

/// Allowed (w, l, h) ranges per class, meters.
pub const VEHICLE_DIMS: [(f64, f64); 3] = [(1.5, 2.6), (3.5, 12.0), (1.3, 4.5)];
pub const PEDESTRIAN_DIMS: [(f64, f64); 3] = [(0.4, 0.9), (0.4, 0.9), (1.4, 2.0)];

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("time {t} s outside scenario range [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground-truth state of one agent at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub agent_id: i32,
    pub class: ObjectClass,
    /// Box center, world frame.
    pub center: Vector3<f64>,
    /// (w, l, h); `l` runs along the heading.
    pub dims: [f64; 3],
    pub heading: f64,
    pub speed: f64,
}

impl AgentState {
    pub fn to_box(&self) -> OrientedBox3D {
        OrientedBox3D {
            x: self.center.x,
            y: self.center.y,
            z: self.center.z,
            w: self.dims[0],
            l: self.dims[1],
            h: self.dims[2],
            theta: self.heading,
        }
    }
}

/// Scripted agent: class, dims and a route polyline (world xy) driven at constant speed.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub agent_id: i32,
    pub class: ObjectClass,
    pub dims: [f64; 3],
    pub route: Vec<[f64; 2]>,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub agents: Vec<AgentSpec>,
    pub duration: f64,
    pub tick: f64,
    /// World → L-Coor.
    pub sensor_pose: RigidTransform,
    pub points_per_agent: usize,
    /// Ground points per square meter over the surveillance square.
    pub ground_point_density: f64,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if !(self.tick > 0.0 && self.tick.is_finite()) {
            return bad(format!("tick must be > 0, got {}", self.tick));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be >= 0, got {}", self.duration));
        }
        if !(self.ground_point_density >= 0.0) {
            return bad("ground_point_density must be >= 0".into());
        }
        if !self.sensor_pose.is_rigid() {
            return bad("sensor_pose is not rigid".into());
        }
        let mut ids = std::collections::HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.agent_id) {
                return bad(format!("duplicate agent id {}", a.agent_id));
            }
            if a.route.is_empty() {
                return bad(format!("agent {} has an empty route", a.agent_id));
            }
            if !(a.speed >= 0.0 && a.speed.is_finite()) {
                return bad(format!(
                    "agent {} has invalid speed {}",
                    a.agent_id, a.speed
                ));
            }
            for p in &a.route {
                if p[0].abs() > AREA_HALF_SIDE || p[1].abs() > AREA_HALF_SIDE {
                    return bad(format!(
                        "agent {} route point ({}, {}) leaves the {} m square",
                        a.agent_id,
                        p[0],
                        p[1],
                        2.0 * AREA_HALF_SIDE
                    ));
                }
            }
            if !dims_valid(a.class, a.dims) {
                return bad(format!(
                    "agent {} dims {:?} outside the {} range",
                    a.agent_id, a.dims, a.class
                ));
            }
        }
        Ok(())
    }

    /// Frame times `k * tick` covering `[0, duration)`.
    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration / self.tick - 1e-9).ceil().max(0.0) as usize;
        (0..n).map(|k| k as f64 * self.tick).collect()
    }

    /// Sensor origin expressed in the world frame.
    pub fn sensor_position(&self) -> Vector3<f64> {
        self.sensor_pose.inverse().translation_vector()
    }
}

pub fn dims_valid(class: ObjectClass, dims: [f64; 3]) -> bool {
    let ranges = match class {
        ObjectClass::Vehicle => VEHICLE_DIMS,
        ObjectClass::Pedestrian => PEDESTRIAN_DIMS,
    };
    dims.iter()
        .zip(ranges.iter())
        .all(|(d, (lo, hi))| *d >= *lo && *d <= *hi)
}

/// One sensor sample: `i` is reflectivity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub i: f32,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, i: f32) -> Self {
        Self { x, y, z, i }
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub t: f64,
    pub points: Vec<Point>,
}

impl PointCloudFrame {
    pub fn new(t: f64, points: Vec<Point>) -> Self {
        Self { t, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Ground truth for one frame: the agents plus (optionally) the sampled points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthFrame {
    pub frame: PointCloudFrame,
    pub agents: Vec<AgentState>,
}

/// Agent states at time `t`.
pub fn step_scenario(config: &ScenarioConfig, t: f64) -> Result<Vec<AgentState>, SceneError> {
    if !(t >= 0.0 && t <= config.duration + 1e-9) {
        return Err(SceneError::TimeOutOfRange {
            t,
            duration: config.duration,
        });
    }
    Ok(config
        .agents
        .iter()
        .map(|agent| {
            let (xy, heading) = walk_route(&agent.route, agent.speed * t);
            AgentState {
                agent_id: agent.agent_id,
                class: agent.class,
                center: Vector3::new(xy[0], xy[1], agent.dims[2] / 2.0),
                dims: agent.dims,
                heading,
                speed: agent.speed,
            }
        })
        .collect())
}

/// Position and tangent heading at arc length `s` along `route`. Past the end
/// the agent parks on the last vertex facing along the last segment.
fn walk_route(route: &[[f64; 2]], s: f64) -> ([f64; 2], f64) {
    if route.len() < 2 {
        return (route[0], 0.0);
    }
    let mut remaining = s;
    let mut last_heading = 0.0;
    for seg in route.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let len = dx.hypot(dy);
        if len == 0.0 {
            continue;
        }
        last_heading = normalize_angle(dy.atan2(dx));
        if remaining < len {
            let f = remaining / len;
            return ([a[0] + f * dx, a[1] + f * dy], last_heading);
        }
        remaining -= len;
    }
    (*route.last().unwrap(), last_heading)
}

fn frame_rng(seed: u64, t: f64) -> ChaCha8Rng {
    // splitmix-style mixing keeps neighbouring timestamps decorrelated
    let mut z = seed ^ t.to_bits().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Number of surface points an agent receives at horizontal range `range`.
pub fn attenuated_count(points_per_agent: usize, range: f64) -> usize {
    let scale = (range * range / 100.0).max(1.0);
    (points_per_agent as f64 / scale).round() as usize
}

/// Samples `n` points uniformly over the surface of `b`, in the box's own frame
/// (x along the length, y along the width, origin at the center).
pub fn sample_box_surface_local<R: Rng>(
    b: &OrientedBox3D,
    n: usize,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    // faces: ±x (w·h), ±y (l·h), ±z (l·w)
    let areas = [b.w * b.h, b.l * b.h, b.l * b.w];
    let total = 2.0 * areas.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 5;
            for k in 0..6 {
                let a = areas[k / 2];
                if pick < a {
                    face = k;
                    break;
                }
                pick -= a;
            }
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let u: f64 = rng.random_range(-1.0..=1.0);
            let v: f64 = rng.random_range(-1.0..=1.0);
            match face / 2 {
                0 => Vector3::new(sign * hl, u * hw, v * hh),
                1 => Vector3::new(u * hl, sign * hw, v * hh),
                _ => Vector3::new(u * hl, v * hw, sign * hh),
            }
        })
        .collect()
}

/// Local box-frame → world.
pub fn box_to_world(b: &OrientedBox3D, local: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = b.theta.sin_cos();
    Vector3::new(
        b.x + c * local.x - s * local.y,
        b.y + s * local.x + c * local.y,
        b.z + local.z,
    )
}

/// Samples one frame at time `t` from the given agent states.
///
/// Coordinates are rounded to `f32` precision so that frames survive the
/// frame-file codec unchanged.
pub fn sample_point_cloud(
    agents: &[AgentState],
    config: &ScenarioConfig,
    t: f64,
) -> PointCloudFrame {
    let mut rng = frame_rng(config.rng_seed, t);
    let sensor = config.sensor_position();
    let mut world: Vec<Vector3<f64>> = Vec::new();

    for agent in agents {
        let b = agent.to_box();
        let range = (agent.center.xy() - sensor.xy()).norm();
        let n = attenuated_count(config.points_per_agent, range);
        world.extend(
            sample_box_surface_local(&b, n, &mut rng)
                .iter()
                .map(|p| box_to_world(&b, p)),
        );
    }

    let side = 2.0 * AREA_HALF_SIDE;
    let n_ground = (side * side * config.ground_point_density).round() as usize;
    for _ in 0..n_ground {
        let x = rng.random_range(-AREA_HALF_SIDE..=AREA_HALF_SIDE);
        let y = rng.random_range(-AREA_HALF_SIDE..=AREA_HALF_SIDE);
        world.push(Vector3::new(x, y, 0.0));
    }

    let points = world
        .iter()
        .map(|p| {
            let q = config.sensor_pose.apply_point(p);
            let i: f32 = rng.random_range(0.0..=1.0);
            Point::new(q.x as f32 as f64, q.y as f32 as f64, q.z as f32 as f64, i)
        })
        .collect();
    PointCloudFrame::new(t, points)
}

/// Runs the whole scenario: one truth frame per tick.
pub fn simulate(config: &ScenarioConfig) -> Result<Vec<TruthFrame>, SceneError> {
    config.validate()?;
    config
        .frame_times()
        .into_iter()
        .map(|t| {
            let agents = step_scenario(config, t)?;
            let frame = sample_point_cloud(&agents, config, t);
            Ok(TruthFrame { frame, agents })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Frame files

fn put_points(out: &mut Vec<u8>, points: &[Point]) {
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        out.extend_from_slice(&(p.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.y as f32).to_le_bytes());
        out.extend_from_slice(&(p.z as f32).to_le_bytes());
        out.extend_from_slice(&p.i.to_le_bytes());
    }
}

pub fn encode_frames(frames: &[PointCloudFrame]) -> Vec<u8> {
    let total: usize = frames.iter().map(|f| 12 + 16 * f.points.len()).sum();
    let mut out = Vec::with_capacity(8 + total);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        out.extend_from_slice(&f.t.to_le_bytes());
        put_points(&mut out, &f.points);
    }
    out
}

pub fn encode_truth(frames: &[TruthFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRUTH_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        out.extend_from_slice(&f.frame.t.to_le_bytes());
        put_points(&mut out, &f.frame.points);
        out.extend_from_slice(&(f.agents.len() as u32).to_le_bytes());
        for a in &f.agents {
            out.extend_from_slice(&a.agent_id.to_le_bytes());
            out.push(a.class.as_u8());
            for v in [
                a.center.x, a.center.y, a.center.z, a.dims[0], a.dims[1], a.dims[2], a.heading,
                a.speed,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SceneError> {
        if self.buf.len() - self.pos < n {
            return Err(SceneError::Format {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32, SceneError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), SceneError> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(SceneError::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    fn points(&mut self) -> Result<Vec<Point>, SceneError> {
        let n = self.u32("point count")? as usize;
        let bytes = self.take(
            n.checked_mul(16).ok_or_else(|| SceneError::Format {
                offset: self.pos,
                message: "point count overflow".into(),
            })?,
            "point records",
        )?;
        Ok(bytes
            .chunks_exact(16)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap());
                Point::new(f(0) as f64, f(1) as f64, f(2) as f64, f(3))
            })
            .collect())
    }

    fn finish(&self) -> Result<(), SceneError> {
        if self.pos != self.buf.len() {
            return Err(SceneError::Format {
                offset: self.pos,
                message: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn decode_frames(buf: &[u8]) -> Result<Vec<PointCloudFrame>, SceneError> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(FRAME_MAGIC)?;
    let count = r.u32("frame count")?;
    let mut frames = Vec::new();
    for _ in 0..count {
        let t = r.f64("timestamp")?;
        let points = r.points()?;
        frames.push(PointCloudFrame { t, points });
    }
    r.finish()?;
    Ok(frames)
}

pub fn decode_truth(buf: &[u8]) -> Result<Vec<TruthFrame>, SceneError> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(TRUTH_MAGIC)?;
    let count = r.u32("frame count")?;
    let mut frames = Vec::new();
    for _ in 0..count {
        let t = r.f64("timestamp")?;
        let points = r.points()?;
        let n = r.u32("agent count")?;
        let mut agents = Vec::new();
        for _ in 0..n {
            let agent_id = r.i32("agent id")?;
            let class_offset = r.pos;
            let class =
                ObjectClass::from_u8(r.take(1, "class")?[0]).ok_or_else(|| SceneError::Format {
                    offset: class_offset,
                    message: "unknown class tag".into(),
                })?;
            let mut v = [0.0; 8];
            for slot in v.iter_mut() {
                *slot = r.f64("agent record")?;
            }
            agents.push(AgentState {
                agent_id,
                class,
                center: Vector3::new(v[0], v[1], v[2]),
                dims: [v[3], v[4], v[5]],
                heading: v[6],
                speed: v[7],
            });
        }
        frames.push(TruthFrame {
            frame: PointCloudFrame { t, points },
            agents,
        });
    }
    r.finish()?;
    Ok(frames)
}

pub fn write_frames(frames: &[PointCloudFrame], path: impl AsRef<Path>) -> Result<(), SceneError> {
    fs::write(path, encode_frames(frames))?;
    Ok(())
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<Vec<PointCloudFrame>, SceneError> {
    decode_frames(&fs::read(path)?)
}

pub fn write_truth(frames: &[TruthFrame], path: impl AsRef<Path>) -> Result<(), SceneError> {
    fs::write(path, encode_truth(frames))?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthFrame>, SceneError> {
    decode_truth(&fs::read(path)?)
}
