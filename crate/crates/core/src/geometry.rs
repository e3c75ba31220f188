//! Rotations, rigid poses, pinhole cameras and farthest-point sampling over
//! rotations.
//!
//! Conventions: quaternions are stored w-first and normalized only when a
//! matrix is formed. Poses map object coordinates into the camera frame,
//! `x_cam = R * x + t`. Pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// A proper rotation matrix (orthonormal, det +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and handedness within 1e-9.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        Self::with_tolerance(m, ORTHO_TOL)
    }

    /// Same as [`RotationMatrix::new`] but with a caller-chosen tolerance, for
    /// matrices that went through single precision storage.
    pub fn with_tolerance(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rotation has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "not a rotation matrix (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(Self(m))
    }

    /// Projects an approximately orthonormal matrix onto SO(3).
    pub fn orthonormalize(m: Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::invalid("svd failed")),
        };
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self::new(u * d * v_t)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n <= 1e-12 {
            return Err(Error::invalid("zero rotation axis"));
        }
        let a = axis / n;
        let (s, c) = (angle * 0.5).sin_cos();
        quat_to_rotation([c, a.x * s, a.y * s, a.z * s])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    /// Unit quaternion (w-first, w >= 0) of this rotation.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            ]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ]
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            [
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            ]
        };
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        q.map(|v| sign * v / n)
    }
}

/// Rigid transform from the object frame to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vector3::zeros())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x + self.translation
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            translation: -(rt.matrix() * self.translation),
            rotation: rt,
        }
    }
}

/// Optimizable rigid delta: raw (unnormalized, w-first) quaternion plus
/// translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0; 3],
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    pub fn rotation(&self) -> Result<RotationMatrix> {
        quat_to_rotation(self.q)
    }

    pub fn to_pose(&self) -> Result<SE3Pose> {
        Ok(SE3Pose::new(self.rotation()?, self.translation()))
    }

    /// Delta that undoes this one.
    pub fn inverse(&self) -> Result<TransformParams> {
        let inv = self.to_pose()?.inverse();
        Ok(TransformParams {
            q: inv.rotation.to_quaternion(),
            t: inv.translation.into(),
        })
    }
}

/// Pinhole camera with image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Back-projects a pixel to the camera-frame point at depth `z`.
    pub fn unproject(&self, pixel: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * z,
            (pixel.y - self.cy) / self.fy * z,
            z,
        )
    }

    /// Projects a camera-frame point, failing for nonpositive depth.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p_cam.z > 0.0) {
            return Err(Error::BehindCamera);
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }
}

/// Rotation of the normalized quaternion `q = [w, x, y, z]`.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<RotationMatrix> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok(RotationMatrix(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )))
}

/// Hamilton product `a * b` of w-first quaternions.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation angle of `a * b^T`, in `[0, pi]`.
pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    // atan2 of the skew and trace parts stays accurate near 0 and pi,
    // where acos of the trace alone loses half the digits
    let m = a.0 * b.0.transpose();
    let cos = (m.trace() - 1.0) * 0.5;
    let sin = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    sin.atan2(cos)
}

/// `p_init * T(delta)` as homogeneous transforms.
pub fn compose_pose(p_init: &SE3Pose, delta: &TransformParams) -> Result<SE3Pose> {
    Ok(p_init.compose(&delta.to_pose()?))
}

/// Pixel coordinates of object point `x` seen from `pose`.
pub fn project_point(x: &Vector3<f64>, pose: &SE3Pose, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    k.project(&pose.transform_point(x))
}

/// Intrinsics of the virtual camera that sees the square window of side
/// `box_scale` centered at `center`, resampled to `out_size` x `out_size`.
///
/// A full-image coordinate `u` maps to `(u - center + box_scale / 2) * out_size / box_scale`
/// in the crop.
pub fn crop_intrinsics(
    k: &CameraIntrinsics,
    center: &Vector2<f64>,
    box_scale: f64,
    out_size: u32,
) -> Result<CameraIntrinsics> {
    if !(box_scale > 0.0) || out_size == 0 {
        return Err(Error::invalid("crop box scale and output size must be positive"));
    }
    let s = out_size as f64 / box_scale;
    CameraIntrinsics::new(
        k.fx * s,
        k.fy * s,
        (k.cx - center.x + box_scale * 0.5) * s,
        (k.cy - center.y + box_scale * 0.5) * s,
        out_size,
        out_size,
    )
}

/// Greedy farthest-point sampling over rotations, seeded at index 0.
///
/// Each round adds the index whose minimum geodesic distance to the selected
/// set is largest; ties go to the lowest index.
pub fn fps_select(rotations: &[RotationMatrix], n_k: usize) -> Result<Vec<usize>> {
    if n_k == 0 || n_k > rotations.len() {
        return Err(Error::invalid(format!(
            "keyframe count {n_k} outside 1..={}",
            rotations.len()
        )));
    }
    let mut selected = Vec::with_capacity(n_k);
    let mut min_dist = vec![f64::INFINITY; rotations.len()];
    let mut taken = vec![false; rotations.len()];
    let mut next = 0;
    for _ in 0..n_k {
        selected.push(next);
        taken[next] = true;
        let r_new = rotations[next];
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rotations.iter().enumerate() {
            if taken[i] {
                continue;
            }
            min_dist[i] = min_dist[i].min(geodesic_distance(r, &r_new));
            if best.is_none_or(|(_, d)| min_dist[i] > d) {
                best = Some((i, min_dist[i]));
            }
        }
        if let Some((i, _)) = best {
            next = i;
        }
    }
    Ok(selected)
}

/// Largest distance from any rotation in `pool` to its nearest member of
/// `selected`.
pub fn covering_radius(pool: &[RotationMatrix], selected: &[RotationMatrix]) -> f64 {
    pool.iter()
        .map(|p| {
            selected
                .iter()
                .map(|s| geodesic_distance(p, s))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Uniformly distributed rotation from three uniforms in `[0, 1)`.
pub fn rotation_from_uniforms(u1: f64, u2: f64, u3: f64) -> RotationMatrix {
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ];
    // unit by construction
    quat_to_rotation(q).expect("unit quaternion")
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<String>,
}

impl Serialize for SE3Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let m = self.rotation.matrix();
        PoseJson {
            r: [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]),
            t: self.translation.into(),
            units: Some("m".into()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SE3Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = PoseJson::deserialize(deserializer)?;
        let scale = match raw.units.as_deref().unwrap_or("m") {
            "m" => 1.0,
            "mm" => 1e-3,
            "cm" => 1e-2,
            other => return Err(D::Error::custom(format!("unknown units {other:?}"))),
        };
        let m = Matrix3::from_fn(|i, j| raw.r[i][j]);
        // pose files are usually written at single precision
        let rotation = RotationMatrix::with_tolerance(m, 1e-5)
            .and_then(|r| RotationMatrix::orthonormalize(*r.matrix()))
            .map_err(D::Error::custom)?;
        Ok(SE3Pose::new(rotation, Vector3::from(raw.t) * scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rot(axis: [f64; 3], deg: f64) -> RotationMatrix {
        RotationMatrix::from_axis_angle(&Vector3::from(axis), deg.to_radians()).unwrap()
    }

    #[test]
    fn quaternion_examples() {
        assert_eq!(quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap(), RotationMatrix::identity());
        let flip = quat_to_rotation([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(*flip.matrix(), Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
        assert_eq!(quat_to_rotation([2.0, 0.0, 0.0, 0.0]).unwrap(), RotationMatrix::identity());
        assert!(matches!(
            quat_to_rotation([0.0, 0.0, 1e-13, 0.0]),
            Err(Error::DegenerateQuaternion)
        ));
    }

    #[test]
    fn quaternion_round_trip() {
        let r = rot([0.3, -1.0, 0.2], 123.0);
        let q = r.to_quaternion();
        let back = quat_to_rotation(q).unwrap();
        assert!((back.matrix() - r.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn geodesic_examples() {
        let i = RotationMatrix::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        let flip = rot([0.0, 0.0, 1.0], 180.0);
        assert!((geodesic_distance(&i, &flip) - PI).abs() < 1e-7);
        let d = geodesic_distance(&rot([1.0, 0.0, 0.0], 30.0), &rot([1.0, 0.0, 0.0], 75.0));
        assert!((d - FRAC_PI_4).abs() < 1e-12);
        assert!((d - std::f64::consts::FRAC_PI_4).abs() < 1e-6);
    }

    #[test]
    fn geodesic_matches_quaternion_product() {
        // angle of a * b^-1 from the scalar part of the quaternion product
        let a = rot([1.0, 0.0, 0.0], 30.0);
        let b = rot([1.0, 0.0, 0.0], 75.0);
        let qa = a.to_quaternion();
        let qb = b.to_quaternion();
        let qb_inv = [qb[0], -qb[1], -qb[2], -qb[3]];
        let rel = quat_mul(qa, qb_inv);
        let angle = 2.0 * rel[0].abs().clamp(0.0, 1.0).acos();
        assert!((geodesic_distance(&a, &b) - angle).abs() < 1e-9);
    }

    #[test]
    fn compose_examples() {
        let id = SE3Pose::identity();
        assert_eq!(compose_pose(&id, &TransformParams::identity()).unwrap(), id);
        let p = SE3Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, 1.0));
        let d = TransformParams {
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0, 0.0, 0.1],
        };
        let out = compose_pose(&p, &d).unwrap();
        assert_eq!(*out.rotation.matrix(), Matrix3::identity());
        assert!((out.translation - Vector3::new(0.0, 0.0, 1.1)).norm() < 1e-15);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let p = SE3Pose::new(rot([0.2, 1.0, -0.4], 40.0), Vector3::new(0.1, -0.2, 0.7));
        let d = TransformParams {
            q: [0.9, 0.1, -0.3, 0.2],
            t: [0.05, 0.02, -0.01],
        };
        let out = compose_pose(&p, &d).unwrap().to_homogeneous();
        let oracle = p.to_homogeneous() * d.to_pose().unwrap().to_homogeneous();
        assert!((out - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let id = SE3Pose::identity();
        let c = project_point(&Vector3::new(0.0, 0.0, 2.0), &id, &k).unwrap();
        assert_eq!(c, Vector2::new(320.0, 240.0));
        let u = project_point(&Vector3::new(0.1, 0.0, 1.0), &id, &k).unwrap();
        assert!((u.x - 370.0).abs() < 1e-12);
        assert!(matches!(
            project_point(&Vector3::new(0.0, 0.0, -1.0), &id, &k),
            Err(Error::BehindCamera)
        ));
    }

    #[test]
    fn crop_examples() {
        let k = CameraIntrinsics::new(600.0, 610.0, 250.0, 260.0, 512, 512).unwrap();
        let same = crop_intrinsics(&k, &Vector2::new(256.0, 256.0), 512.0, 512).unwrap();
        assert_eq!(same, k);
        let c = crop_intrinsics(&k, &Vector2::new(200.0, 220.0), 300.0, 224).unwrap();
        assert!((c.fx - 448.0).abs() < 1e-12);
        assert_eq!((c.width, c.height), (224, 224));
    }

    #[test]
    fn crop_projection_consistency() {
        let k = CameraIntrinsics::new(600.0, 590.0, 321.5, 238.25, 640, 480).unwrap();
        let pose = SE3Pose::new(rot([1.0, 2.0, 0.5], 25.0), Vector3::new(0.03, -0.02, 0.6));
        let center = Vector2::new(355.3, 210.7);
        let (box_scale, out) = (173.0, 224);
        let ck = crop_intrinsics(&k, &center, box_scale, out).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.05, -0.02, 0.03], [-0.04, 0.04, -0.05]] {
            let x = Vector3::from(x);
            let full = project_point(&x, &pose, &k).unwrap();
            let mapped = (full - center).add_scalar(box_scale * 0.5) * (out as f64 / box_scale);
            let direct = project_point(&x, &pose, &ck).unwrap();
            assert!((mapped - direct).norm() < 1e-9);
        }
    }

    #[test]
    fn fps_examples() {
        let rs = vec![
            RotationMatrix::identity(),
            rot([0.0, 0.0, 1.0], 180.0),
            rot([0.0, 0.0, 1.0], 90.0),
        ];
        assert_eq!(fps_select(&rs, 1).unwrap(), vec![0]);
        assert_eq!(fps_select(&rs, 2).unwrap(), vec![0, 1]);
        let mut all = fps_select(&rs, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(fps_select(&rs, 0).is_err());
        assert!(fps_select(&rs, 4).is_err());
    }

    #[test]
    fn fps_ties_go_to_lowest_index() {
        // 90 degrees either way about z are equally far from the seed
        let rs = vec![
            RotationMatrix::identity(),
            rot([0.0, 0.0, 1.0], 90.0),
            rot([0.0, 0.0, 1.0], -90.0),
        ];
        assert_eq!(fps_select(&rs, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn pose_json_round_trip() {
        let p = SE3Pose::new(rot([0.0, 1.0, 0.0], FRAC_PI_2.to_degrees()), Vector3::new(0.1, 0.2, 0.3));
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"R\""));
        let back: SE3Pose = serde_json::from_str(&s).unwrap();
        assert!((back.to_homogeneous() - p.to_homogeneous()).abs().max() < 1e-12);
        let mm: SE3Pose =
            serde_json::from_str(r#"{"R":[[1,0,0],[0,1,0],[0,0,1]],"t":[0,0,500],"units":"mm"}"#).unwrap();
        assert!((mm.translation.z - 0.5).abs() < 1e-12);
        assert!(serde_json::from_str::<SE3Pose>(r#"{"R":[[2,0,0],[0,1,0],[0,0,1]],"t":[0,0,1]}"#).is_err());
    }
}
