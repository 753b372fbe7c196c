//! Multi-object tracking on the ground plane with id lifting back onto 3D boxes.
//!
//! Each frame runs three steps:
//!
//! 1. project the 3D detections onto the ground plane (`x, y, w, l`);
//! 2. associate them with the live 2D tracks: constant-velocity Kalman
//!    prediction, optimal assignment on center distance, gated updates, track
//!    birth and death;
//! 3. lift the ids back: every 3D detection takes the id of the first 2D track
//!    whose center lies strictly within `d_o` of it, or `-1` if none does.
//!
//! There is no appearance model; association is purely kinematic.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::geometry::{ObjectClass, OrientedBox3D};

/// Id carried by detections that no track claimed.
pub const UNASSIGNED_ID: i64 = -1;

/// Cost given to track/detection pairs outside the association gate.
pub const GATE_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackError {
    #[error("frame at t={t} arrived after t={last}")]
    OutOfOrder { t: f64, last: f64 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
}

impl Box2D {
    pub fn distance(&self, other: &Box2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackState {
    Tentative,
    Confirmed,
}

/// How a detection picks its id among the 2D tracks inside the lift gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LiftMode {
    /// First track in list order (the reference behaviour).
    #[default]
    First,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Lift gate: detection-to-track distance below which the id is attached.
    pub d_o: f64,
    /// Association gate for the assignment step.
    pub gate_assoc: f64,
    pub n_init: u32,
    pub max_age: u32,
    /// Acceleration noise density of the constant-velocity model.
    pub process_noise: f64,
    /// Standard deviation of the measured x, y, w, l.
    pub measurement_noise: f64,
    pub lift: LiftMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            d_o: 2.0,
            gate_assoc: 3.0,
            n_init: 3,
            max_age: 5,
            process_noise: 1.0,
            measurement_noise: 0.1,
            lift: LiftMode::First,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let bad = |m: &str| Err(TrackError::InvalidConfig(m.to_string()));
        if !(self.d_o > 0.0) {
            return bad("d_o must be > 0");
        }
        if !(self.gate_assoc > 0.0) {
            return bad("gate_assoc must be > 0");
        }
        if self.n_init < 1 {
            return bad("n_init must be >= 1");
        }
        if self.max_age < 1 {
            return bad("max_age must be >= 1");
        }
        if !(self.process_noise >= 0.0 && self.measurement_noise > 0.0) {
            return bad("noise scales must be positive");
        }
        Ok(())
    }
}

type State = SVector<f64, 6>;
type Cov = SMatrix<f64, 6, 6>;

/// A ground-plane track. `bbox` is the measurement it was last associated
/// with; the filter estimate lives in `mean` = `(x, y, w, l, vx, vy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track2D {
    pub bbox: Box2D,
    pub id: i64,
    pub state: TrackState,
    pub mean: State,
    pub covariance: Cov,
    /// Consecutive frames with an associated detection.
    pub hits: u32,
    /// Consecutive frames without one.
    pub misses: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track3D {
    pub bbox: OrientedBox3D,
    pub class: ObjectClass,
    /// Track id, or [`UNASSIGNED_ID`].
    pub id: i64,
}

/// What the last assignment step saw and chose.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationRecord {
    /// Gated cost matrix, tracks × detections.
    pub cost: Vec<Vec<f64>>,
    /// Optimal (track, detection) pairs before gating is applied.
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Drops height, vertical position, heading and class.
pub fn project_to_2d(dets: &[Detection]) -> Vec<Box2D> {
    dets.iter()
        .map(|d| Box2D {
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            l: d.bbox.l,
        })
        .collect()
}

/// Minimum-cost assignment for a rectangular matrix. Returns, for every row,
/// the assigned column when rows ≤ columns, or pairs covering every column
/// otherwise. O(n²·m) shortest augmenting paths with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return Vec::new();
    }
    if n > m {
        let transposed: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..n).map(|i| cost[i][j]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&transposed)
            .into_iter()
            .map(|(j, i)| (i, j))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Attaches track ids to detections through the `d_o` gate.
pub fn lift_to_3d(
    dets: &[Detection],
    tracks2d: &[Track2D],
    d_o: f64,
    mode: LiftMode,
) -> Vec<Track3D> {
    dets.iter()
        .map(|d| {
            let p = Box2D {
                x: d.bbox.x,
                y: d.bbox.y,
                w: d.bbox.w,
                l: d.bbox.l,
            };
            let id = match mode {
                LiftMode::First => tracks2d
                    .iter()
                    .find(|t| p.distance(&t.bbox) < d_o)
                    .map(|t| t.id),
                LiftMode::Nearest => tracks2d
                    .iter()
                    .map(|t| (p.distance(&t.bbox), t.id))
                    .filter(|(dist, _)| *dist < d_o)
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, id)| id),
            };
            Track3D {
                bbox: d.bbox,
                class: d.class,
                id: id.unwrap_or(UNASSIGNED_ID),
            }
        })
        .collect()
}

/// Single-owner tracker state.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track2D>,
    next_id: i64,
    last_t: Option<f64>,
    last_association: AssociationRecord,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackError> {
        config.validate()?;
        Ok(Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
            last_t: None,
            last_association: AssociationRecord::default(),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Every live track, including those coasting without a detection.
    pub fn tracks(&self) -> &[Track2D] {
        &self.tracks
    }

    pub fn last_association(&self) -> &AssociationRecord {
        &self.last_association
    }

    fn transition(dt: f64) -> Cov {
        let mut f = Cov::identity();
        f[(0, 4)] = dt;
        f[(1, 5)] = dt;
        f
    }

    fn process_cov(&self, dt: f64) -> Cov {
        let q = self.config.process_noise;
        let mut m = Cov::zeros();
        for (p, v) in [(0, 4), (1, 5)] {
            m[(p, p)] = q * dt.powi(3) / 3.0;
            m[(p, v)] = q * dt.powi(2) / 2.0;
            m[(v, p)] = q * dt.powi(2) / 2.0;
            m[(v, v)] = q * dt;
        }
        // box size drifts slowly
        m[(2, 2)] = 0.01 * q * dt;
        m[(3, 3)] = 0.01 * q * dt;
        m
    }

    fn predict(&mut self, dt: f64) {
        let f = Self::transition(dt);
        let q = self.process_cov(dt);
        for t in &mut self.tracks {
            t.mean = f * t.mean;
            t.covariance = f * t.covariance * f.transpose() + q;
            t.covariance = 0.5 * (t.covariance + t.covariance.transpose());
        }
    }

    fn update(track: &mut Track2D, z: &Box2D, r_sd: f64) {
        let mut h = SMatrix::<f64, 4, 6>::zeros();
        for k in 0..4 {
            h[(k, k)] = 1.0;
        }
        let r = SMatrix::<f64, 4, 4>::identity() * (r_sd * r_sd);
        let meas = SVector::<f64, 4>::new(z.x, z.y, z.w, z.l);
        let s = h * track.covariance * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .expect("innovation covariance is positive definite");
        let k = track.covariance * h.transpose() * s_inv;
        track.mean += k * (meas - h * track.mean);
        // Joseph form keeps the covariance symmetric PSD
        let a = Cov::identity() - k * h;
        track.covariance = a * track.covariance * a.transpose() + k * r * k.transpose();
        track.covariance = 0.5 * (track.covariance + track.covariance.transpose());
    }

    /// One association step over `dets2d`, `dt` seconds after the previous one.
    /// Returns the tracks that were matched or born in this step.
    pub fn associate_2d(&mut self, dets2d: &[Box2D], dt: f64) -> Vec<Track2D> {
        self.predict(dt);

        let cost: Vec<Vec<f64>> = self
            .tracks
            .iter()
            .map(|t| {
                let pred = Box2D {
                    x: t.mean[0],
                    y: t.mean[1],
                    w: t.mean[2],
                    l: t.mean[3],
                };
                dets2d
                    .iter()
                    .map(|d| {
                        let dist = pred.distance(d);
                        if dist <= self.config.gate_assoc {
                            dist
                        } else {
                            GATE_PENALTY
                        }
                    })
                    .collect()
            })
            .collect();
        let assignment = if dets2d.is_empty() {
            Vec::new()
        } else {
            hungarian(&cost)
        };
        let total_cost = assignment.iter().map(|&(i, j)| cost[i][j]).sum();

        let mut det_taken = vec![false; dets2d.len()];
        let mut track_hit = vec![false; self.tracks.len()];
        for &(ti, di) in &assignment {
            if cost[ti][di] >= GATE_PENALTY {
                continue;
            }
            det_taken[di] = true;
            track_hit[ti] = true;
            let track = &mut self.tracks[ti];
            Self::update(track, &dets2d[di], self.config.measurement_noise);
            track.bbox = dets2d[di];
            track.hits += 1;
            track.misses = 0;
            if track.state == TrackState::Tentative && track.hits >= self.config.n_init {
                track.state = TrackState::Confirmed;
            }
        }
        self.last_association = AssociationRecord {
            cost,
            assignment,
            total_cost,
        };

        for (track, hit) in self.tracks.iter_mut().zip(&track_hit) {
            if !hit {
                track.misses += 1;
                track.hits = 0;
            }
        }
        let max_age = self.config.max_age;
        self.tracks.retain(|t| t.misses < max_age);

        let r2 = self.config.measurement_noise.powi(2);
        for (d, taken) in dets2d.iter().zip(det_taken) {
            if taken {
                continue;
            }
            let mut cov = Cov::identity() * r2;
            cov[(4, 4)] = 100.0;
            cov[(5, 5)] = 100.0;
            self.tracks.push(Track2D {
                bbox: *d,
                id: self.next_id,
                state: if self.config.n_init <= 1 {
                    TrackState::Confirmed
                } else {
                    TrackState::Tentative
                },
                mean: State::from_column_slice(&[d.x, d.y, d.w, d.l, 0.0, 0.0]),
                covariance: cov,
                hits: 1,
                misses: 0,
            });
            self.next_id += 1;
        }

        self.tracks
            .iter()
            .filter(|t| t.misses == 0)
            .cloned()
            .collect()
    }

    /// Full per-frame step: project, associate, lift.
    pub fn track_frame(&mut self, t: f64, dets: &[Detection]) -> Result<Vec<Track3D>, TrackError> {
        let dt = match self.last_t {
            Some(last) if t < last => return Err(TrackError::OutOfOrder { t, last }),
            Some(last) => t - last,
            None => 0.0,
        };
        self.last_t = Some(t);
        let dets2d = project_to_2d(dets);
        let tracks2d = self.associate_2d(&dets2d, dt);
        Ok(lift_to_3d(
            dets,
            &tracks2d,
            self.config.d_o,
            self.config.lift,
        ))
    }
}

/// Smallest eigenvalue of a track covariance; used to check positive semidefiniteness.
pub fn min_covariance_eigenvalue(track: &Track2D) -> f64 {
    track.covariance.symmetric_eigenvalues().min()
}
