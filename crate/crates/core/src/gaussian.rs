//! The 3D Gaussian object model.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{quat_mul, TransformParams};

/// Number of SH basis functions per channel for a given degree.
pub fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// A set of anisotropic 3D Gaussians with activated parameters.
///
/// `sh_coeffs` is laid out primitive-major, then channel, then basis
/// function: index `(i * 3 + c) * B + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianObject {
    pub means: Vec<Vector3<f64>>,
    pub orientations: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
    pub diameter: f64,
}

impl GaussianObject {
    /// Assembles an object, computing its diameter and checking every
    /// invariant.
    pub fn new(
        means: Vec<Vector3<f64>>,
        orientations: Vec<[f64; 4]>,
        scales: Vec<Vector3<f64>>,
        opacities: Vec<f64>,
        sh_coeffs: Vec<f64>,
        sh_degree: usize,
    ) -> Result<Self> {
        let n = means.len();
        if n == 0 {
            return Err(Error::EmptyObject);
        }
        if sh_degree > 3 {
            return Err(Error::invalid(format!("sh degree {sh_degree} > 3")));
        }
        let diameter = if n >= 2 { object_diameter(&means)? } else { 0.0 };
        let obj = Self {
            means,
            orientations,
            scales,
            opacities,
            sh_coeffs,
            sh_degree,
            diameter,
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn basis_count(&self) -> usize {
        sh_basis_count(self.sh_degree)
    }

    /// SH coefficients of primitive `i`, channel-major (3 x B).
    pub fn sh(&self, i: usize) -> &[f64] {
        let b = self.basis_count();
        &self.sh_coeffs[i * 3 * b..(i + 1) * 3 * b]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        if n == 0 {
            return Err(Error::EmptyObject);
        }
        let b = self.basis_count();
        if self.orientations.len() != n
            || self.scales.len() != n
            || self.opacities.len() != n
            || self.sh_coeffs.len() != n * 3 * b
        {
            return Err(Error::shape("per-primitive arrays disagree in length"));
        }
        let finite = self.means.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.scales.iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self.orientations.iter().all(|q| q.iter().all(|v| v.is_finite()))
            && self.opacities.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteField);
        }
        if self.scales.iter().any(|s| s.iter().any(|&v| v <= 0.0)) {
            return Err(Error::invalid("scales must be positive"));
        }
        if self.opacities.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::invalid("opacities must lie in [0, 1]"));
        }
        if self
            .orientations
            .iter()
            .any(|q| (q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() > 1e-6)
        {
            return Err(Error::invalid("orientations must be unit quaternions"));
        }
        Ok(())
    }
}

/// Diagonal of the axis-aligned bounding box of `means`.
pub fn object_diameter(means: &[Vector3<f64>]) -> Result<f64> {
    if means.len() < 2 {
        return Err(Error::invalid("object diameter needs at least two points"));
    }
    let mut lo = means[0];
    let mut hi = means[0];
    for m in &means[1..] {
        lo = lo.inf(m);
        hi = hi.sup(m);
    }
    Ok((hi - lo).norm())
}

/// Applies `means <- R(q) * mean + t`; with `transform_covariance` the
/// orientations are also left-multiplied by the normalized delta rotation.
pub fn rigid_transform_object(
    obj: &GaussianObject,
    delta: &TransformParams,
    transform_covariance: bool,
) -> Result<GaussianObject> {
    let r = delta.rotation()?;
    let rm = r.matrix();
    let t = delta.translation();
    let mut out = obj.clone();
    for m in out.means.iter_mut() {
        *m = rm * *m + t;
    }
    if transform_covariance {
        let n = delta.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let qn = delta.q.map(|v| v / n);
        for o in out.orientations.iter_mut() {
            *o = quat_mul(qn, *o);
        }
    }
    Ok(out)
}

/// Deterministic pseudo-random object for tests and synthetic scenes.
///
/// Means are uniform in a cube of side `extent` centered at the origin, scales
/// lie in `[extent / 100, extent / 20]`, opacities in `[0.5, 1]`.
pub fn synth_object(seed: u64, count: usize, extent: f64, sh_degree: usize) -> Result<GaussianObject> {
    if count == 0 {
        return Err(Error::EmptyObject);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = sh_basis_count(sh_degree);
    let (s_lo, s_hi) = (extent / 100.0, extent / 20.0);
    let mut means = Vec::with_capacity(count);
    let mut orientations = Vec::with_capacity(count);
    let mut scales = Vec::with_capacity(count);
    let mut opacities = Vec::with_capacity(count);
    let mut sh = Vec::with_capacity(count * 3 * b);
    for _ in 0..count {
        means.push(Vector3::from_fn(|_, _| (rng.random::<f64>() - 0.5) * extent));
        let q: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        orientations.push(q.map(|v| v / n));
        if rng.random_bool(0.5) {
            let s = rng.random_range(s_lo..=s_hi);
            scales.push(Vector3::repeat(s));
        } else {
            scales.push(Vector3::from_fn(|_, _| rng.random_range(s_lo..=s_hi)));
        }
        opacities.push(rng.random_range(0.5..=1.0));
        for _ in 0..3 {
            // DC term spans roughly the full displayable range after decoding
            sh.push(rng.random_range(-1.6..1.6));
            for _ in 1..b {
                sh.push(rng.random_range(-0.3..0.3));
            }
        }
    }
    GaussianObject::new(means, orientations, scales, opacities, sh, sh_degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_to_rotation, RotationMatrix};

    #[test]
    fn diameter_examples() {
        let two = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        assert_eq!(object_diameter(&two).unwrap(), 1.0);
        let cube: Vec<_> = (0..8)
            .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        assert!((object_diameter(&cube).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert!(object_diameter(&two[..1]).is_err());
    }

    #[test]
    fn diameter_matches_brute_force_box() {
        let obj = synth_object(3, 200, 0.3, 0).unwrap();
        let mut diag = [0.0f64; 3];
        for axis in 0..3 {
            let vals: Vec<f64> = obj.means.iter().map(|m| m[axis]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            diag[axis] = hi - lo;
        }
        let oracle = diag.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((obj.diameter - oracle).abs() < 1e-15);
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_object(7, 500, 0.1, 2).unwrap();
        let b = synth_object(7, 500, 0.1, 2).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.scales.iter().all(|s| s.iter().all(|&v| (0.001..=0.005).contains(&v))));
        assert!(a.opacities.iter().all(|&v| (0.5..=1.0).contains(&v)));
        assert!(a.diameter > 0.0);
        let single = synth_object(1, 1, 0.1, 0).unwrap();
        assert!(object_diameter(&single.means).is_err());
    }

    #[test]
    fn transform_examples() {
        let obj = synth_object(1, 20, 0.2, 1).unwrap();
        let same = rigid_transform_object(&obj, &TransformParams::identity(), true).unwrap();
        assert_eq!(same, obj);

        let shift = TransformParams {
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0, 0.0, 0.5],
        };
        let moved = rigid_transform_object(&obj, &shift, false).unwrap();
        for (a, b) in moved.means.iter().zip(&obj.means) {
            assert!((a - b - Vector3::new(0.0, 0.0, 0.5)).norm() < 1e-15);
        }
        assert_eq!(moved.orientations, obj.orientations);
        assert_eq!(moved.sh_coeffs, obj.sh_coeffs);
    }

    #[test]
    fn quarter_turn_rotates_means_and_orientations() {
        let mut obj = synth_object(2, 5, 0.2, 0).unwrap();
        obj.means[0] = Vector3::new(1.0, 0.0, 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let delta = TransformParams {
            q: [h, 0.0, 0.0, h],
            t: [0.0; 3],
        };
        let out = rigid_transform_object(&obj, &delta, true).unwrap();
        assert!((out.means[0] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let rz = delta.rotation().unwrap();
        for (before, after) in obj.orientations.iter().zip(&out.orientations) {
            let expect = rz.compose(&quat_to_rotation(*before).unwrap());
            let got: RotationMatrix = quat_to_rotation(*after).unwrap();
            assert!((expect.matrix() - got.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn degenerate_delta_is_rejected() {
        let obj = synth_object(2, 5, 0.2, 0).unwrap();
        let delta = TransformParams {
            q: [0.0; 4],
            t: [0.0; 3],
        };
        assert!(matches!(
            rigid_transform_object(&obj, &delta, false),
            Err(Error::DegenerateQuaternion)
        ));
    }
}
