//! Rotations, pinhole projection, robust plane fitting, homographies and
//! pose-error metrics.
//!
//! Convention used throughout the crate: a [`Pose`] stores the world-to-camera
//! rotation `R(q)` and the camera center `c` in world coordinates, so that a
//! world point maps to the camera frame as `x_cam = R(q) * (X - c)`. The camera
//! looks down its +z axis, +x points right and +y points down in the image.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Norms within this distance of one are treated as already normalized, which
/// makes [`quat_normalize`] exactly idempotent.
const UNIT_NORM_SLACK: f64 = 8.0 * f64::EPSILON;

/// Hamilton quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quaternion::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Quaternion::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Mat3) -> Self {
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        quat_normalize(q).unwrap_or(Quaternion::IDENTITY)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conjugate(&self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(&self, s: f64) -> Self {
        Quaternion::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_rotation_matrix() * v
    }
}

impl std::ops::Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, r: Quaternion) -> Quaternion {
        let l = self;
        Quaternion::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

/// Unit-norm quaternion on the `w >= 0` hemisphere.
pub fn quat_normalize(q: Quaternion) -> Result<Quaternion> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    let q = if (n - 1.0).abs() <= UNIT_NORM_SLACK {
        q
    } else {
        q.scale(1.0 / n)
    };
    Ok(if q.w < 0.0 { -q } else { q })
}

/// Rotation angle in degrees separating two unit quaternions, in `[0, 180]`.
pub fn quat_angular_error_deg(q1: &Quaternion, q2: &Quaternion) -> f64 {
    let d = q1.dot(q2).abs().clamp(-1.0, 1.0);
    2.0 * d.acos().to_degrees()
}

/// Camera pose: world-to-camera rotation plus camera center in world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub center: Vec3,
}

impl Pose {
    pub fn new(rotation: Quaternion, center: Vec3) -> Self {
        Pose { rotation, center }
    }

    pub fn identity() -> Self {
        Pose::new(Quaternion::IDENTITY, Vec3::zeros())
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.rotate(&(x - self.center))
    }

    pub fn camera_to_world(&self, x: &Vec3) -> Vec3 {
        self.rotation.to_rotation_matrix().transpose() * x + self.center
    }

    /// Unit optical axis expressed in world coordinates.
    pub fn viewing_direction(&self) -> Vec3 {
        self.rotation.to_rotation_matrix().transpose() * Vec3::z()
    }

    /// Translation in the `x_cam = R x + t` form.
    pub fn translation(&self) -> Vec3 {
        -(self.rotation.to_rotation_matrix() * self.center)
    }
}

/// Pinhole camera with a single radial distortion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal_point: Vec2,
    pub radial_k1: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        CameraIntrinsics {
            focal,
            principal_point: Vec2::new(width as f64 / 2.0, height as f64 / 2.0),
            radial_k1: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::DegenerateGeometry(format!(
                "invalid intrinsics: focal {} size {}x{}",
                self.focal, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// Projects a world point; returns the pixel and the camera-frame depth.
pub fn project(x: &Vec3, pose: &Pose, k: &CameraIntrinsics) -> Result<(Vec2, f64)> {
    let xc = pose.world_to_camera(x);
    let depth = xc.z;
    if !(depth > 0.0) {
        return Err(Error::BehindCamera { depth });
    }
    let u = xc.x / depth;
    let v = xc.y / depth;
    let d = 1.0 + k.radial_k1 * (u * u + v * v);
    let pixel = Vec2::new(k.focal * d * u, k.focal * d * v) + k.principal_point;
    Ok((pixel, depth))
}

/// Inverse of [`project`] for a known depth.
pub fn unproject(pixel: &Vec2, depth: f64, pose: &Pose, k: &CameraIntrinsics) -> Vec3 {
    let du = (pixel.x - k.principal_point.x) / k.focal;
    let dv = (pixel.y - k.principal_point.y) / k.focal;
    let (mut u, mut v) = (du, dv);
    if k.radial_k1 != 0.0 {
        // fixed-point undistortion, converges for moderate distortion
        for _ in 0..50 {
            let d = 1.0 + k.radial_k1 * (u * u + v * v);
            u = du / d;
            v = dv / d;
        }
    }
    pose.camera_to_world(&Vec3::new(u * depth, v * depth, depth))
}

/// Plane `normal . X = offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) - self.offset
    }

    /// Two unit vectors spanning the plane, orthogonal to each other and the normal.
    pub fn basis(&self) -> (Vec3, Vec3) {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let u = n.cross(&helper).normalize();
        let v = n.cross(&u);
        (u, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneFitConfig {
    pub iterations: usize,
    /// Inlier threshold as a fraction of the bounding-box diagonal.
    pub threshold_fraction: f64,
    /// Relative inlier-count band within which candidates count as tied.
    pub tie_band: f64,
    /// Fitted normals are oriented to have non-negative dot product with this.
    pub up_hint: [f64; 3],
}

impl Default for PlaneFitConfig {
    fn default() -> Self {
        PlaneFitConfig {
            iterations: 1000,
            threshold_fraction: 0.1,
            tie_band: 0.02,
            up_hint: [0.0, 0.0, 1.0],
        }
    }
}

/// Principal axes of a point set: (centroid, singular values descending, axes as columns).
fn principal_axes(points: &[Vec3]) -> (Vec3, [f64; 3], Mat3) {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0).sqrt());
    let axes = Mat3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (centroid, vals, axes)
}

fn is_collinear(points: &[Vec3]) -> bool {
    let (_, s, _) = principal_axes(points);
    s[0] == 0.0 || s[1] <= 1e-9 * s[0]
}

fn least_squares_plane(points: &[Vec3]) -> Plane {
    let (centroid, _, axes) = principal_axes(points);
    let normal: Vec3 = axes.column(2).into_owned();
    Plane {
        normal,
        offset: normal.dot(&centroid),
    }
}

/// Robust RANSAC plane through camera centers, refit by least squares on the
/// winning inlier set.
pub fn fit_horizontal_plane<R: Rng + ?Sized>(
    centers: &[Vec3],
    cfg: &PlaneFitConfig,
    rng: &mut R,
) -> Result<Plane> {
    let n = centers.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "plane fit needs at least 3 points, got {n}"
        )));
    }
    if is_collinear(centers) {
        return Err(Error::DegenerateGeometry(
            "plane fit points are collinear".into(),
        ));
    }
    let (_, _, axes) = principal_axes(centers);
    let flattest: Vec3 = axes.column(2).into_owned();

    let (lo, hi) = centers.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let threshold = cfg.threshold_fraction * (hi - lo).norm();
    let count_inliers = |plane: &Plane| {
        centers
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= threshold)
            .count()
    };

    let mut candidates: Vec<(usize, Plane)> = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for taken in [i.min(j), i.max(j)] {
            if k >= taken {
                k += 1;
            }
        }
        let (a, b, c) = (centers[i], centers[j], centers[k]);
        let cross = (b - a).cross(&(c - a));
        let scale = (b - a).norm() * (c - a).norm();
        if scale == 0.0 || cross.norm() <= 1e-9 * scale {
            continue;
        }
        let normal = cross.normalize();
        let plane = Plane {
            normal,
            offset: normal.dot(&a),
        };
        candidates.push((count_inliers(&plane), plane));
    }
    let best = candidates
        .iter()
        .map(|(c, _)| *c)
        .max()
        .ok_or_else(|| Error::DegenerateGeometry("no valid plane hypothesis".into()))?;
    let floor = (1.0 - cfg.tie_band) * best as f64;
    let (_, chosen) = candidates
        .iter()
        .filter(|(c, _)| *c as f64 >= floor)
        .max_by(|(_, p), (_, q)| {
            p.normal
                .dot(&flattest)
                .abs()
                .total_cmp(&q.normal.dot(&flattest).abs())
        })
        .copied()
        .expect("best candidate lies in its own tie band");

    let inliers: Vec<Vec3> = centers
        .iter()
        .filter(|p| chosen.signed_distance(p).abs() <= threshold)
        .copied()
        .collect();
    let mut plane = if inliers.len() >= 3 && !is_collinear(&inliers) {
        least_squares_plane(&inliers)
    } else {
        chosen
    };
    let up = Vec3::from(cfg.up_hint);
    if plane.normal.dot(&up) < 0.0 {
        plane.normal = -plane.normal;
        plane.offset = -plane.offset;
    }
    Ok(plane)
}

/// Similarity transform moving the centroid to the origin with mean distance sqrt(2).
fn normalizing_transform(points: &[Vec2]) -> Mat3 {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Mat3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    )
}

/// Normalized DLT homography mapping `src` onto `dst`.
pub fn fit_homography(src: &[Vec2], dst: &[Vec2]) -> Result<Mat3> {
    if src.len() != dst.len() {
        return Err(Error::ShapeError(format!(
            "{} source points but {} destination points",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 4 {
        return Err(Error::DegenerateGeometry(format!(
            "homography needs at least 4 correspondences, got {n}"
        )));
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ts * s.push(1.0);
        let d = td * d.push(1.0);
        let (x, y) = (s.x / s.z, s.y / s.z);
        let (u, v) = (d.x / d.z, d.y / d.z);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        for (c, val) in [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]
            .into_iter()
            .enumerate()
        {
            a[(r0, c)] = val;
        }
        for (c, val) in [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]
            .into_iter()
            .enumerate()
        {
            a[(r1, c)] = val;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| {
        Error::NumericalError("SVD did not produce right singular vectors".into())
    })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if largest == 0.0 || second <= 1e-10 * largest {
        return Err(Error::DegenerateGeometry(
            "homography design matrix is rank deficient".into(),
        ));
    }
    let h = v_t.row(smallest);
    let hn = Mat3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::NumericalError("normalizing transform not invertible".into()))?;
    let mut hm = td_inv * hn * ts;
    let corner = hm[(2, 2)];
    if corner.abs() > 1e-12 * hm.norm() {
        hm /= corner;
    }
    Ok(hm)
}

/// Maps a point through a homography; `None` when it lands at infinity.
pub fn apply_homography(h: &Mat3, p: &Vec2) -> Option<Vec2> {
    let x = h * p.push(1.0);
    if x.z.abs() <= 1e-12 * (x.x.abs() + x.y.abs()).max(1.0) {
        return None;
    }
    Some(Vec2::new(x.x / x.z, x.y / x.z))
}
