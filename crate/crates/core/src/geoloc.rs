//! Georeferencing: H-Coor → ECEF → WGS84 geodetic, and the sensor-to-ECEF
//! fit from surveyed ground control points.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{normalize_degrees_360, RigidTransform};
use crate::track::Track3D;
use crate::wire::PerceptionMessage;

/// Iteration cap of the latitude solver.
pub const MAX_BOWRING_ITERATIONS: usize = 10;
/// Convergence threshold on successive latitude estimates, radians.
pub const BOWRING_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum GeolocError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate ground-control configuration: {0}")]
    Degenerate(String),
    #[error("transform is not rigid")]
    NotRigid,
    #[error("GCP file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reference ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wgs84Params {
    /// Equatorial radius, meters.
    pub a: f64,
    /// Flattening.
    pub f: f64,
    /// Square of the first eccentricity, `1 - (1 - f)²`.
    pub e2: f64,
}

impl Wgs84Params {
    pub fn new(a: f64, f: f64) -> Self {
        Self {
            a,
            f,
            e2: 1.0 - (1.0 - f) * (1.0 - f),
        }
    }

    pub fn semi_minor(&self) -> f64 {
        self.a * (1.0 - self.f)
    }

    /// Prime-vertical radius of curvature at latitude `phi` (radians).
    pub fn prime_vertical_radius(&self, phi: f64) -> f64 {
        self.a / (1.0 - self.e2 * phi.sin().powi(2)).sqrt()
    }
}

impl Default for Wgs84Params {
    fn default() -> Self {
        Self::new(6_378_137.0, 1.0 / 298.257_223_563)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefPos {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPos {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Latitude and longitude in degrees, altitude in meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticPos {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GeodeticPos {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Self {
        Self { lat, lon, alt }
    }
}

/// Maps a point from H-Coor into ECEF: `P_ECEF · P_Cali⁻¹ · p`.
pub fn lidar_to_ecef(
    p_hor: &Vector3<f64>,
    p_cali: &RigidTransform,
    p_ecef: &RigidTransform,
) -> Result<EcefPos, GeolocError> {
    if !p_cali.is_rigid() || !p_ecef.is_rigid() {
        return Err(GeolocError::NotRigid);
    }
    let in_lidar = p_cali.inverse().apply_point(p_hor);
    Ok(EcefPos::from_vector(&p_ecef.apply_point(&in_lidar)))
}

/// Converts ECEF to geodetic coordinates with Bowring's iteration.
pub fn ecef_to_geodetic(p: &EcefPos, wgs: &Wgs84Params) -> Result<GeodeticPos, GeolocError> {
    ecef_to_geodetic_counted(p, wgs).map(|(g, _)| g)
}

/// As [`ecef_to_geodetic`], also returning the number of latitude evaluations.
pub fn ecef_to_geodetic_counted(
    p: &EcefPos,
    wgs: &Wgs84Params,
) -> Result<(GeodeticPos, usize), GeolocError> {
    let (x, y, z) = (p.x, p.y, p.z);
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(GeolocError::Domain("non-finite ECEF position".into()));
    }
    if p.to_vector().norm() < 1.0 {
        return Err(GeolocError::Domain(
            "position within 1 m of the Earth's center".into(),
        ));
    }
    let (a, f, e2) = (wgs.a, wgs.f, wgs.e2);
    let s = x.hypot(y);
    if s < 1e-9 {
        let lat = if z >= 0.0 { 90.0 } else { -90.0 };
        return Ok((GeodeticPos::new(lat, 0.0, z.abs() - wgs.semi_minor()), 0));
    }

    let mut lon = y.atan2(x).to_degrees();
    if lon <= -180.0 {
        lon += 360.0;
    }

    let numerator_coeff = e2 * (1.0 - f) / (1.0 - e2) * a;
    let mut beta = z.atan2((1.0 - f) * s);
    let mut phi = f64::NAN;
    let mut iterations = 0;
    while iterations < MAX_BOWRING_ITERATIONS {
        let (sb, cb) = beta.sin_cos();
        let next = (z + numerator_coeff * sb.powi(3)).atan2(s - e2 * a * cb.powi(3));
        iterations += 1;
        let converged = (next - phi).abs() < BOWRING_TOLERANCE;
        phi = next;
        if converged {
            break;
        }
        beta = ((1.0 - f) * phi.sin()).atan2(phi.cos());
    }

    let (sp, cp) = phi.sin_cos();
    let n = wgs.prime_vertical_radius(phi);
    let alt = s * cp + (z + e2 * n * sp) * sp - n;
    Ok((GeodeticPos::new(phi.to_degrees(), lon, alt), iterations))
}

/// Closed-form geodetic → ECEF.
pub fn geodetic_to_ecef(g: &GeodeticPos, wgs: &Wgs84Params) -> EcefPos {
    let phi = g.lat.to_radians();
    let lam = g.lon.to_radians();
    let n = wgs.prime_vertical_radius(phi);
    let (sp, cp) = phi.sin_cos();
    let (sl, cl) = lam.sin_cos();
    EcefPos::new(
        (n + g.alt) * cp * cl,
        (n + g.alt) * cp * sl,
        (n * (1.0 - wgs.e2) + g.alt) * sp,
    )
}

/// Rotation whose columns are the local East, North, Up axes at `origin`, in ECEF.
pub fn enu_axes(origin: &GeodeticPos) -> Matrix3<f64> {
    let (sp, cp) = origin.lat.to_radians().sin_cos();
    let (sl, cl) = origin.lon.to_radians().sin_cos();
    Matrix3::new(
        -sl,
        -sp * cl,
        cp * cl, //
        cl,
        -sp * sl,
        cp * sl, //
        0.0,
        cp,
        sp,
    )
}

/// Local East-North-Up frame anchored at `origin`, as a transform ENU → ECEF.
pub fn enu_to_ecef_transform(origin: &GeodeticPos, wgs: &Wgs84Params) -> RigidTransform {
    let t = geodetic_to_ecef(origin, wgs).to_vector();
    RigidTransform::from_rotation_translation(enu_axes(origin), t)
        .expect("ENU axes are orthonormal")
}

/// One surveyed point: its sensor-frame coordinates and its ECEF position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcpCorrespondence {
    pub lidar_point: Vector3<f64>,
    pub ecef_point: EcefPos,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefFit {
    /// L-Coor → ECEF.
    pub transform: RigidTransform,
    pub rms: f64,
}

/// Least-squares rigid registration of the lidar points onto their ECEF
/// positions (no scale): centroid alignment, then the rotation from the SVD
/// of the cross-covariance with the determinant forced to +1.
pub fn estimate_ecef_transform(gcps: &[GcpCorrespondence]) -> Result<EcefFit, GeolocError> {
    if gcps.len() < 3 {
        return Err(GeolocError::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            gcps.len()
        )));
    }
    let n = gcps.len() as f64;
    let src_c = gcps.iter().map(|g| g.lidar_point).sum::<Vector3<f64>>() / n;
    let dst_c = gcps
        .iter()
        .map(|g| g.ecef_point.to_vector())
        .sum::<Vector3<f64>>()
        / n;

    let mut spread = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for g in gcps {
        let a = g.lidar_point - src_c;
        let b = g.ecef_point.to_vector() - dst_c;
        spread += a * a.transpose();
        cross += a * b.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(GeolocError::Degenerate(
            "control points are collinear or coincident".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = dst_c - rotation * src_c;
    let transform = RigidTransform::from_rotation_translation(rotation, translation)
        .map_err(|_| GeolocError::NotRigid)?;

    let sq: f64 = gcps
        .iter()
        .map(|g| (transform.apply_point(&g.lidar_point) - g.ecef_point.to_vector()).norm_squared())
        .sum();
    Ok(EcefFit {
        transform,
        rms: (sq / n).sqrt(),
    })
}

/// Compass heading (degrees clockwise from north) of an H-Coor heading `theta`
/// for an object at `at`.
pub fn geographic_heading(theta: f64, h_to_ecef: &RigidTransform, at: &GeodeticPos) -> f64 {
    let x_axis = h_to_ecef.apply_vector(&Vector3::x());
    let enu = enu_axes(at).transpose() * x_axis;
    let yaw = enu.y.atan2(enu.x);
    normalize_degrees_360(90.0 - (theta + yaw).to_degrees())
}

/// Turns one frame of tracks into perception messages stamped with `t`.
pub fn georeference_tracks(
    tracks: &[Track3D],
    t: f64,
    p_cali: &RigidTransform,
    p_ecef: &RigidTransform,
    wgs: &Wgs84Params,
) -> Result<Vec<PerceptionMessage>, GeolocError> {
    if !p_cali.is_rigid() || !p_ecef.is_rigid() {
        return Err(GeolocError::NotRigid);
    }
    let h_to_ecef = p_ecef.compose(&p_cali.inverse());
    tracks
        .iter()
        .map(|tr| {
            let ecef = lidar_to_ecef(&tr.bbox.center(), p_cali, p_ecef)?;
            let g = ecef_to_geodetic(&ecef, wgs)?;
            let heading = geographic_heading(tr.bbox.theta, &h_to_ecef, &g);
            Ok(PerceptionMessage {
                t,
                id: i32::try_from(tr.id).unwrap_or(-1),
                lat: g.lat,
                lon: g.lon,
                alt: g.alt,
                w: tr.bbox.w as f32,
                l: tr.bbox.l as f32,
                h: tr.bbox.h as f32,
                // f32 rounding can land exactly on 360
                theta: {
                    let th = heading as f32;
                    if th >= 360.0 {
                        0.0
                    } else {
                        th
                    }
                },
            })
        })
        .collect()
}

/// Parses a GCP file: six whitespace-separated numbers per line
/// (`lidar x y z`, `ECEF X Y Z`), `#` starts a comment.
pub fn parse_gcps(text: &str) -> Result<Vec<GcpCorrespondence>, GeolocError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| GeolocError::Parse {
                    line: k + 1,
                    message: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 6 {
            return Err(GeolocError::Parse {
                line: k + 1,
                message: format!("expected 6 fields, found {}", vals.len()),
            });
        }
        out.push(GcpCorrespondence {
            lidar_point: Vector3::new(vals[0], vals[1], vals[2]),
            ecef_point: EcefPos::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(out)
}

pub fn format_gcps(gcps: &[GcpCorrespondence]) -> String {
    let mut s = String::from("# lidar_x lidar_y lidar_z ecef_x ecef_y ecef_z\n");
    for g in gcps {
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            g.lidar_point.x,
            g.lidar_point.y,
            g.lidar_point.z,
            g.ecef_point.x,
            g.ecef_point.y,
            g.ecef_point.z
        );
    }
    s
}

pub fn read_gcps(path: impl AsRef<Path>) -> Result<Vec<GcpCorrespondence>, GeolocError> {
    parse_gcps(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e2_identity() {
        let w = Wgs84Params::default();
        assert!((w.e2 - (1.0 - (1.0 - w.f).powi(2))).abs() < 1e-15);
        assert!((w.e2 - 0.006_694_379_990_14).abs() < 1e-14);
    }

    #[test]
    fn equator_surface_point() {
        let w = Wgs84Params::default();
        let g = ecef_to_geodetic(&EcefPos::new(6_378_137.0, 0.0, 0.0), &w).unwrap();
        assert_eq!(g.lat, 0.0);
        assert_eq!(g.lon, 0.0);
        assert!(g.alt.abs() < 1e-9);
    }

    #[test]
    fn longitude_quadrants() {
        let w = Wgs84Params::default();
        let lon = |x: f64, y: f64| {
            ecef_to_geodetic(&EcefPos::new(x * 6e6, y * 6e6, 1e5), &w)
                .unwrap()
                .lon
        };
        assert!((lon(1.0, 1.0) - 45.0).abs() < 1e-12);
        assert!((lon(-1.0, 1.0) - 135.0).abs() < 1e-12);
        assert!((lon(-1.0, -1.0) + 135.0).abs() < 1e-12);
        assert_eq!(lon(-1.0, 0.0), 180.0);
    }

    #[test]
    fn tiny_xy_gives_45_degrees() {
        let w = Wgs84Params::default();
        let g = ecef_to_geodetic(&EcefPos::new(1.0, 1.0, 6_356_752.0), &w).unwrap();
        assert!((g.lon - 45.0).abs() < 1e-12);
    }

    #[test]
    fn pole_and_forward_examples() {
        let w = Wgs84Params::default();
        let e = geodetic_to_ecef(&GeodeticPos::new(0.0, 0.0, 0.0), &w);
        assert_eq!((e.x, e.y, e.z), (6_378_137.0, 0.0, 0.0));
        let p = geodetic_to_ecef(&GeodeticPos::new(90.0, 33.0, 0.0), &w);
        assert!(p.x.abs() < 1e-6 && p.y.abs() < 1e-6);
        assert!((p.z - w.semi_minor()).abs() < 1e-6);
        let g = ecef_to_geodetic(&EcefPos::new(0.0, 0.0, -w.semi_minor() - 10.0), &w).unwrap();
        assert_eq!((g.lat, g.lon), (-90.0, 0.0));
        assert!((g.alt - 10.0).abs() < 1e-9);
    }

    #[test]
    fn near_center_rejected() {
        let w = Wgs84Params::default();
        assert!(ecef_to_geodetic(&EcefPos::new(0.1, 0.2, 0.3), &w).is_err());
    }

    #[test]
    fn lidar_to_ecef_trivial_chains() {
        let id = RigidTransform::identity();
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(
            lidar_to_ecef(&p, &id, &id).unwrap(),
            EcefPos::new(1.0, 2.0, 3.0)
        );
        let t = RigidTransform::translation(Vector3::new(10.0, -5.0, 7.0));
        assert_eq!(
            lidar_to_ecef(&p, &id, &t).unwrap(),
            EcefPos::new(11.0, -3.0, 10.0)
        );
    }

    #[test]
    fn collinear_gcps_rejected() {
        let gcps: Vec<_> = (0..3)
            .map(|k| GcpCorrespondence {
                lidar_point: Vector3::new(k as f64, 2.0 * k as f64, 0.0),
                ecef_point: EcefPos::new(k as f64, 0.0, 0.0),
            })
            .collect();
        assert!(matches!(
            estimate_ecef_transform(&gcps),
            Err(GeolocError::Degenerate(_))
        ));
        assert!(matches!(
            estimate_ecef_transform(&gcps[..2]),
            Err(GeolocError::Degenerate(_))
        ));
    }

    #[test]
    fn gcp_text_roundtrip_and_errors() {
        let text = "# header\n1 2 3 4 5 6\n\n  7 8 9 10 11 12 # trailing\n";
        let g = parse_gcps(text).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].ecef_point, EcefPos::new(10.0, 11.0, 12.0));
        assert_eq!(parse_gcps(&format_gcps(&g)).unwrap(), g);
        match parse_gcps("1 2 3\n") {
            Err(GeolocError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_gcps("1 2 3 4 5 x\n").is_err());
    }

    #[test]
    fn heading_east_is_ninety() {
        let w = Wgs84Params::default();
        let origin = GeodeticPos::new(33.97, -117.33, 300.0);
        let h_to_ecef = enu_to_ecef_transform(&origin, &w);
        assert!((geographic_heading(0.0, &h_to_ecef, &origin) - 90.0).abs() < 1e-9);
        let north = geographic_heading(std::f64::consts::FRAC_PI_2, &h_to_ecef, &origin);
        assert!(north.abs() < 1e-9 || (north - 360.0).abs() < 1e-9);
    }
}
