//! Geofencing and ground-plane self-calibration (L-Coor → H-Coor).

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::geometry::RigidTransform;
use crate::scene::{Point, PointCloudFrame};

/// Working mount height of the sensor above the road, meters.
pub const DEFAULT_MOUNT_HEIGHT: f64 = 4.74;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocError {
    #[error("invalid geofence: {0}")]
    InvalidBounds(String),
    #[error("calibration needs at least {needed} ground candidates, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("ground plane fit failed: inlier ratio {ratio:.3} below {min:.2}")]
    CalibrationFailed { ratio: f64, min: f64 },
    #[error("transform is not rigid")]
    NotRigid,
}

/// Closed axis-aligned surveillance volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeofenceBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GeofenceBounds {
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -5.0,
            z_max: 0.0,
        }
    }
}

impl GeofenceBounds {
    pub fn validate(&self) -> Result<(), PreprocError> {
        for (axis, lo, hi) in [
            ("x", self.x_min, self.x_max),
            ("y", self.y_min, self.y_max),
            ("z", self.z_min, self.z_max),
        ] {
            if !(lo < hi) {
                return Err(PreprocError::InvalidBounds(format!(
                    "{axis}_min ({lo}) must be < {axis}_max ({hi})"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min
            && p.x <= self.x_max
            && p.y >= self.y_min
            && p.y <= self.y_max
            && p.z >= self.z_min
            && p.z <= self.z_max
    }
}

/// Keeps the points inside `bounds`, preserving order and timestamp.
pub fn geofence(frame: &PointCloudFrame, bounds: &GeofenceBounds) -> PointCloudFrame {
    PointCloudFrame {
        t: frame.t,
        points: frame
            .points
            .iter()
            .copied()
            .filter(|p| bounds.contains(p))
            .collect(),
    }
}

/// Left-multiplies every point by `transform`; reflectivity is untouched.
pub fn apply_transform(
    frame: &PointCloudFrame,
    transform: &RigidTransform,
) -> Result<PointCloudFrame, PreprocError> {
    if !transform.is_rigid() {
        return Err(PreprocError::NotRigid);
    }
    let r = transform.rotation();
    let t = transform.translation_vector();
    Ok(PointCloudFrame {
        t: frame.t,
        points: frame
            .points
            .iter()
            .map(|p| {
                let q = r * p.xyz() + t;
                Point::new(q.x, q.y, q.z, p.i)
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationParams {
    pub mount_height: f64,
    /// Fraction of lowest-z points treated as ground candidates.
    pub stratum_fraction: f64,
    pub inlier_threshold: f64,
    pub iterations: usize,
    pub min_inlier_ratio: f64,
    pub min_points: usize,
    pub seed: u64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            mount_height: DEFAULT_MOUNT_HEIGHT,
            stratum_fraction: 0.3,
            inlier_threshold: 0.1,
            iterations: 200,
            min_inlier_ratio: 0.3,
            min_points: 50,
            seed: 0,
        }
    }
}

/// Result of a ground-plane calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundCalibration {
    /// L-Coor → H-Coor.
    pub transform: RigidTransform,
    /// Unit ground normal in L-Coor, pointing towards the sensor.
    pub normal: Vector3<f64>,
    pub inlier_ratio: f64,
    /// RMS of `z + mount_height` over the inliers after transformation.
    pub rms: f64,
}

/// Estimates the leveling transform from the ground points of `frame`.
///
/// RANSAC fits a plane to the lowest-z stratum, the inliers are refit by
/// least squares, and the returned rotation is the smallest one taking the
/// plane normal onto +z. No yaw is introduced.
pub fn estimate_ground_calibration(
    frame: &PointCloudFrame,
    params: &CalibrationParams,
) -> Result<GroundCalibration, PreprocError> {
    let mut pts: Vec<Vector3<f64>> = frame.points.iter().map(|p| p.xyz()).collect();
    pts.sort_by(|a, b| a.z.total_cmp(&b.z));
    let n_stratum = ((pts.len() as f64) * params.stratum_fraction).ceil() as usize;
    let stratum = &pts[..n_stratum.min(pts.len())];
    if stratum.len() < params.min_points.max(3) {
        return Err(PreprocError::InsufficientPoints {
            needed: params.min_points.max(3),
            got: stratum.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Vector3<f64>, Vector3<f64>)> = None;
    for _ in 0..params.iterations {
        let a = stratum[rng.random_range(0..stratum.len())];
        let b = stratum[rng.random_range(0..stratum.len())];
        let c = stratum[rng.random_range(0..stratum.len())];
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm < 1e-9 {
            continue;
        }
        let n = n / norm;
        let count = stratum
            .iter()
            .filter(|p| n.dot(&(*p - a)).abs() < params.inlier_threshold)
            .count();
        if best.as_ref().is_none_or(|(k, _, _)| count > *k) {
            best = Some((count, n, a));
        }
    }
    let (count, n0, a0) = best.ok_or(PreprocError::CalibrationFailed {
        ratio: 0.0,
        min: params.min_inlier_ratio,
    })?;
    let ratio = count as f64 / stratum.len() as f64;
    if ratio < params.min_inlier_ratio {
        return Err(PreprocError::CalibrationFailed {
            ratio,
            min: params.min_inlier_ratio,
        });
    }

    let inliers: Vec<Vector3<f64>> = stratum
        .iter()
        .copied()
        .filter(|p| n0.dot(&(p - a0)).abs() < params.inlier_threshold)
        .collect();
    let centroid = inliers.iter().sum::<Vector3<f64>>() / inliers.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &inliers {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(k).into_owned().normalize();
    // the sensor sits above the ground
    if normal.dot(&(-centroid)) < 0.0 {
        normal = -normal;
    }

    // normal == -z is impossible after orienting it towards the sensor
    let rotation =
        Rotation3::rotation_between(&normal, &Vector3::z()).unwrap_or_else(Rotation3::identity);
    let ground_z = (rotation * centroid).z;
    let transform = RigidTransform::from_parts(
        &rotation,
        Vector3::new(0.0, 0.0, -params.mount_height - ground_z),
    );
    let rms = (inliers
        .iter()
        .map(|p| (transform.apply_point(p).z + params.mount_height).powi(2))
        .sum::<f64>()
        / inliers.len() as f64)
        .sqrt();
    Ok(GroundCalibration {
        transform,
        normal,
        inlier_ratio: ratio,
        rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_ground(n: usize, height: f64, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-40.0..40.0),
                    -height,
                )
            })
            .collect()
    }

    fn frame_of(points: &[Vector3<f64>]) -> PointCloudFrame {
        PointCloudFrame::new(
            0.0,
            points
                .iter()
                .map(|p| Point::new(p.x, p.y, p.z, 0.5))
                .collect(),
        )
    }

    #[test]
    fn default_bounds_examples() {
        let b = GeofenceBounds::default();
        let f = PointCloudFrame::new(
            1.5,
            vec![
                Point::new(60.0, 0.0, -2.0, 0.5),
                Point::new(0.0, 0.0, -1.0, 0.3),
            ],
        );
        let g = geofence(&f, &b);
        assert_eq!(g.t, 1.5);
        assert_eq!(g.points, vec![Point::new(0.0, 0.0, -1.0, 0.3)]);
    }

    #[test]
    fn closed_bounds_keep_edges() {
        let b = GeofenceBounds::default();
        assert!(b.contains(&Point::new(51.2, -51.2, 0.0, 0.0)));
        assert!(b.contains(&Point::new(0.0, 0.0, -5.0, 1.0)));
    }

    #[test]
    fn invalid_bounds_rejected() {
        let b = GeofenceBounds {
            z_min: 1.0,
            z_max: 1.0,
            ..Default::default()
        };
        assert!(b.validate().is_err());
    }

    #[test]
    fn translation_example() {
        let f = frame_of(&[Vector3::new(1.0, 2.0, -4.74)]);
        let t = RigidTransform::translation(Vector3::new(0.0, 0.0, 4.74));
        let g = apply_transform(&f, &t).unwrap();
        assert_eq!(g.points[0].xyz(), Vector3::new(1.0, 2.0, 0.0));
        assert_eq!(g.points[0].i, 0.5);
    }

    #[test]
    fn untilted_sensor_gives_identity() {
        let f = frame_of(&flat_ground(500, DEFAULT_MOUNT_HEIGHT, 3));
        let cal = estimate_ground_calibration(&f, &CalibrationParams::default()).unwrap();
        let m = cal.transform.matrix();
        assert!(
            (m - nalgebra::Matrix4::identity()).abs().max() < 1e-9,
            "{m}"
        );
        assert!(cal.rms < 1e-9);
    }

    #[test]
    fn recovers_known_pitch() {
        let world = flat_ground(800, DEFAULT_MOUNT_HEIGHT, 4);
        // L-Coor is the leveled frame rotated by a 15° pitch
        let tilt = RigidTransform::from_euler(0.0, 15f64.to_radians(), 0.0, Vector3::zeros());
        let level_to_l = tilt.inverse();
        let pts: Vec<_> = world.iter().map(|p| level_to_l.apply_point(p)).collect();
        let cal =
            estimate_ground_calibration(&frame_of(&pts), &CalibrationParams::default()).unwrap();
        // the recovered rotation should undo level_to_l, i.e. equal `tilt`
        let residual = cal.transform.rotation() * level_to_l.rotation();
        let angle = Rotation3::from_matrix_unchecked(residual).angle();
        assert!(
            angle.to_degrees() < 0.1,
            "residual angle {}°",
            angle.to_degrees()
        );
        assert!(cal.rms <= 0.05);
    }

    #[test]
    fn uniform_noise_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..3000)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                )
            })
            .collect();
        let err = estimate_ground_calibration(&frame_of(&pts), &CalibrationParams::default())
            .unwrap_err();
        assert!(
            matches!(err, PreprocError::CalibrationFailed { .. }),
            "{err}"
        );
    }

    #[test]
    fn too_few_points() {
        let f = frame_of(&flat_ground(20, 4.0, 1));
        assert!(matches!(
            estimate_ground_calibration(&f, &CalibrationParams::default()),
            Err(PreprocError::InsufficientPoints { .. })
        ));
    }
}
