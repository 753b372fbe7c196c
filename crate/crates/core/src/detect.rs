//! Oriented 3D detection: two interchangeable backends plus the anchor
//! residual encoding and training-loss terms of the box regression head.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::normalize_angle;
pub use crate::geometry::{ObjectClass, OrientedBox3D};
use crate::preproc::GeofenceBounds;
use crate::scene::{AgentState, PointCloudFrame, PEDESTRIAN_DIMS, VEHICLE_DIMS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectError {
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox3D,
    pub class: ObjectClass,
    pub score: f64,
}

/// Normalized regression targets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxResiduals {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dw: f64,
    pub dl: f64,
    pub dh: f64,
    /// Sine of the heading difference, so always in `[-1, 1]`.
    pub dtheta: f64,
}

impl BoxResiduals {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.dw,
            self.dl,
            self.dh,
            self.dtheta,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_loc: f64,
    pub beta_cls: f64,
    pub beta_dir: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_loc: 2.0,
            beta_cls: 1.0,
            beta_dir: 0.2,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn check_dims(b: &OrientedBox3D, role: &str) -> Result<(), DetectError> {
    if b.w > 0.0 && b.l > 0.0 && b.h > 0.0 {
        Ok(())
    } else {
        Err(DetectError::Domain(format!(
            "{role} dims must be positive (w={}, l={}, h={})",
            b.w, b.l, b.h
        )))
    }
}

/// Encodes `gt` against `anchor`. Planar offsets are normalized by the anchor
/// footprint diagonal, the vertical offset by the anchor height.
pub fn encode_box_residuals(
    gt: &OrientedBox3D,
    anchor: &OrientedBox3D,
) -> Result<BoxResiduals, DetectError> {
    check_dims(anchor, "anchor")?;
    check_dims(gt, "ground-truth")?;
    let diag = anchor.w.hypot(anchor.l);
    Ok(BoxResiduals {
        dx: (gt.x - anchor.x) / diag,
        dy: (gt.y - anchor.y) / diag,
        dz: (gt.z - anchor.z) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dl: (gt.l / anchor.l).ln(),
        dh: (gt.h / anchor.h).ln(),
        dtheta: (gt.theta - anchor.theta).sin(),
    })
}

/// Inverse of [`encode_box_residuals`]. The sine heading only covers ±π/2
/// around the anchor; `dir_flipped` selects the opposite half-turn.
pub fn decode_box_residuals(
    r: &BoxResiduals,
    anchor: &OrientedBox3D,
    dir_flipped: bool,
) -> Result<OrientedBox3D, DetectError> {
    if !(r.dtheta.abs() <= 1.0) {
        return Err(DetectError::Domain(format!(
            "dtheta {} outside [-1, 1]",
            r.dtheta
        )));
    }
    check_dims(anchor, "anchor")?;
    let diag = anchor.w.hypot(anchor.l);
    let mut theta = anchor.theta + r.dtheta.asin();
    if dir_flipped {
        theta += PI;
    }
    Ok(OrientedBox3D {
        x: r.dx * diag + anchor.x,
        y: r.dy * diag + anchor.y,
        z: r.dz * anchor.h + anchor.z,
        w: r.dw.exp() * anchor.w,
        l: r.dl.exp() * anchor.l,
        h: r.dh.exp() * anchor.h,
        theta: normalize_angle(theta),
    })
}

/// Direction label for a ground-truth/anchor pair: flipped when the headings
/// differ by more than a quarter turn.
pub fn direction_label(gt: &OrientedBox3D, anchor: &OrientedBox3D) -> bool {
    (gt.theta - anchor.theta).cos() < 0.0
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Sum of smooth-L1 over the seven component differences.
pub fn localization_loss(pred: &BoxResiduals, target: &BoxResiduals) -> f64 {
    pred.as_array()
        .iter()
        .zip(target.as_array())
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

/// Focal classification loss `-α (1-p)^γ ln p`.
pub fn focal_loss(p: f64, weights: &LossWeights) -> Result<f64, DetectError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DetectError::Domain(format!(
            "probability {p} outside (0, 1]"
        )));
    }
    Ok(-weights.alpha * (1.0 - p).powf(weights.gamma) * p.ln())
}

/// Two-class softmax cross-entropy. `flipped == false` selects `logit_pos`
/// as the true class.
pub fn direction_loss(logit_pos: f64, logit_neg: f64, flipped: bool) -> f64 {
    let (target, other) = if flipped {
        (logit_neg, logit_pos)
    } else {
        (logit_pos, logit_neg)
    };
    // log(e^t + e^o) - t, arranged to avoid overflow
    let d = other - target;
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

pub fn total_loss(
    loc: f64,
    cls: f64,
    dir: f64,
    n_pos: usize,
    weights: &LossWeights,
) -> Result<f64, DetectError> {
    if n_pos == 0 {
        return Err(DetectError::Domain(
            "no positive anchors (n_pos = 0)".into(),
        ));
    }
    Ok((weights.beta_loc * loc + weights.beta_cls * cls + weights.beta_dir * dir) / n_pos as f64)
}

// ---------------------------------------------------------------------------
// Backends

/// Noise model of the ground-truth detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleNoise {
    pub sigma_pos: f64,
    pub sigma_dim: f64,
    pub sigma_theta: f64,
    pub p_miss: f64,
    /// Mean number of clutter boxes per frame.
    pub fp_rate: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            sigma_pos: 0.0,
            sigma_dim: 0.0,
            sigma_theta: 0.0,
            p_miss: 0.0,
            fp_rate: 0.0,
        }
    }
}

impl OracleNoise {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(0.0..=1.0).contains(&self.p_miss) {
            return Err(DetectError::Domain(format!(
                "p_miss {} outside [0, 1]",
                self.p_miss
            )));
        }
        for (name, v) in [
            ("sigma_pos", self.sigma_pos),
            ("sigma_dim", self.sigma_dim),
            ("sigma_theta", self.sigma_theta),
            ("fp_rate", self.fp_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DetectError::Domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma)
            .expect("sigma validated")
            .sample(rng)
    }
}

/// Ground-truth detector: drops, perturbs and pads the true agent boxes.
///
/// Clutter boxes are placed uniformly over the `region` footprint, resting on
/// its floor.
pub fn detect_oracle(
    agents: &[AgentState],
    noise: &OracleNoise,
    region: &GeofenceBounds,
    seed: u64,
) -> Result<Vec<Detection>, DetectError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(agents.len());
    for a in agents {
        if noise.p_miss > 0.0 && rng.random::<f64>() < noise.p_miss {
            continue;
        }
        let mut b = a.to_box();
        b.x += gaussian(&mut rng, noise.sigma_pos);
        b.y += gaussian(&mut rng, noise.sigma_pos);
        b.z += gaussian(&mut rng, noise.sigma_pos);
        b.w = (b.w + gaussian(&mut rng, noise.sigma_dim)).max(0.05);
        b.l = (b.l + gaussian(&mut rng, noise.sigma_dim)).max(0.05);
        b.h = (b.h + gaussian(&mut rng, noise.sigma_dim)).max(0.05);
        b.theta = normalize_angle(b.theta + gaussian(&mut rng, noise.sigma_theta));
        out.push(Detection {
            bbox: b,
            class: a.class,
            score: 1.0,
        });
    }
    if noise.fp_rate > 0.0 {
        let n = Poisson::new(noise.fp_rate)
            .expect("fp_rate validated")
            .sample(&mut rng) as usize;
        for _ in 0..n {
            let class = if rng.random::<bool>() {
                ObjectClass::Vehicle
            } else {
                ObjectClass::Pedestrian
            };
            let ranges = match class {
                ObjectClass::Vehicle => VEHICLE_DIMS,
                ObjectClass::Pedestrian => PEDESTRIAN_DIMS,
            };
            let mut dims = [0.0; 3];
            for (d, (lo, hi)) in dims.iter_mut().zip(ranges) {
                *d = rng.random_range(lo..=hi);
            }
            let bbox = OrientedBox3D {
                x: rng.random_range(region.x_min..=region.x_max),
                y: rng.random_range(region.y_min..=region.y_max),
                z: region.z_min + dims[2] / 2.0,
                w: dims[0],
                l: dims[1],
                h: dims[2],
                theta: normalize_angle(rng.random_range(-PI..PI)),
            };
            out.push(Detection {
                bbox,
                class,
                score: rng.random_range(0.0..=1.0),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub voxel: f64,
    pub min_points: usize,
    /// Ground height in H-Coor; points at or below `ground_z + 0.2` are discarded.
    pub ground_z: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            voxel: 0.5,
            min_points: 8,
            ground_z: -crate::preproc::DEFAULT_MOUNT_HEIGHT,
        }
    }
}

/// Largest footprint side separating pedestrians from vehicles in the cluster backend.
pub const CLUSTER_VEHICLE_FOOTPRINT: f64 = 2.5;
const GROUND_CLEARANCE: f64 = 0.2;
const MIN_EXTENT: f64 = 0.05;

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Clustering baseline: ground removal, voxelization, 26-connected components,
/// and a PCA-oriented box per component.
pub fn detect_cluster(frame_h: &PointCloudFrame, params: &ClusterParams) -> Vec<Detection> {
    let floor = params.ground_z + GROUND_CLEARANCE;
    let pts: Vec<[f64; 3]> = frame_h
        .points
        .iter()
        .filter(|p| p.z > floor)
        .map(|p| [p.x, p.y, p.z])
        .collect();
    if pts.is_empty() {
        return Vec::new();
    }

    let inv = 1.0 / params.voxel;
    let mut voxels: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut point_voxel = Vec::with_capacity(pts.len());
    for p in &pts {
        let key = (
            (p[0] * inv).floor() as i64,
            (p[1] * inv).floor() as i64,
            (p[2] * inv).floor() as i64,
        );
        let next = voxels.len();
        point_voxel.push(*voxels.entry(key).or_insert(next));
    }

    let mut parent: Vec<usize> = (0..voxels.len()).collect();
    for (&(x, y, z), &idx) in &voxels {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    if let Some(&other) = voxels.get(&(x + dx, y + dy, z + dz)) {
                        let (a, b) = (find(&mut parent, idx), find(&mut parent, other));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }

    // group points by component root; BTreeMap keeps output order deterministic
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (pi, &v) in point_voxel.iter().enumerate() {
        let root = find(&mut parent, v);
        groups.entry(root).or_default().push(pi);
    }

    groups
        .values()
        .filter(|members| members.len() >= params.min_points)
        .map(|members| fit_cluster_box(&pts, members, params.ground_z))
        .collect()
}

fn fit_cluster_box(pts: &[[f64; 3]], members: &[usize], ground_z: f64) -> Detection {
    let n = members.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    let mut z_max = f64::NEG_INFINITY;
    for &i in members {
        cx += pts[i][0];
        cy += pts[i][1];
        z_max = z_max.max(pts[i][2]);
    }
    cx /= n;
    cy /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in members {
        let (dx, dy) = (pts[i][0] - cx, pts[i][1] - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // major-axis angle of the 2×2 scatter matrix
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = theta.sin_cos();
    let (mut u_min, mut u_max, mut v_min, mut v_max) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &i in members {
        let (dx, dy) = (pts[i][0] - cx, pts[i][1] - cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u_min = u_min.min(u);
        u_max = u_max.max(u);
        v_min = v_min.min(v);
        v_max = v_max.max(v);
    }
    let l = (u_max - u_min).max(MIN_EXTENT);
    let w = (v_max - v_min).max(MIN_EXTENT);
    // objects stand on the ground, so the box spans ground_z..z_max
    let h = (z_max - ground_z).max(MIN_EXTENT);
    let class = if w.max(l) >= CLUSTER_VEHICLE_FOOTPRINT {
        ObjectClass::Vehicle
    } else {
        ObjectClass::Pedestrian
    };
    Detection {
        bbox: OrientedBox3D {
            x: cx,
            y: cy,
            z: ground_z + h / 2.0,
            w,
            l,
            h,
            theta: normalize_angle(theta),
        },
        class,
        score: (n / 100.0).min(1.0),
    }
}

/// Which detector backend a pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetectorBackend {
    #[default]
    Oracle,
    Cluster,
}

/// Common interface over the detector backends. `truth_h` carries the true
/// agent states expressed in H-Coor; backends that work from points ignore it.
pub trait Detector {
    fn detect(
        &mut self,
        frame_h: &PointCloudFrame,
        truth_h: &[AgentState],
    ) -> Result<Vec<Detection>, DetectError>;
}

pub struct OracleDetector {
    pub noise: OracleNoise,
    pub region: GeofenceBounds,
    pub seed: u64,
}

impl Detector for OracleDetector {
    fn detect(
        &mut self,
        frame_h: &PointCloudFrame,
        truth_h: &[AgentState],
    ) -> Result<Vec<Detection>, DetectError> {
        let seed = self.seed ^ frame_h.t.to_bits().rotate_left(17);
        detect_oracle(truth_h, &self.noise, &self.region, seed)
    }
}

pub struct ClusterDetector {
    pub params: ClusterParams,
}

impl Detector for ClusterDetector {
    fn detect(
        &mut self,
        frame_h: &PointCloudFrame,
        _truth_h: &[AgentState],
    ) -> Result<Vec<Detection>, DetectError> {
        Ok(detect_cluster(frame_h, &self.params))
    }
}
