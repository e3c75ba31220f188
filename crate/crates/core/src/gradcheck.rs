//! Finite-difference check of the analytic pose gradient.
//!
//! The rendered loss is only piecewise smooth: a pixel whose alpha crosses
//! the 1/255 skip threshold, a depth-order swap, or the transmittance stop
//! each add a jump. Central differences straddling a jump carry a bias that
//! does not shrink with the step, so check scenes are drawn (by rejection,
//! deterministically from the seed) such that no jump lies inside the
//! stencil: every splat stays above the skip threshold over the whole frame,
//! opacities stay below the cap, depths are well separated and transmittance
//! stays far from the stop.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gaussian::{rigid_transform_object, GaussianObject};
use crate::geometry::{CameraIntrinsics, RotationMatrix, SE3Pose, TransformParams};
use crate::image::RgbImage;
use crate::refine::{loss_and_gradient, loss_at, RefinementConfig};
use crate::render::{compute_cov3d, project_gaussian, render, RenderOptions, MIN_ALPHA};

pub const CHECK_SIZE: u32 = 64;
pub const FD_STEP: f64 = 1e-4;
/// Coordinates smaller than this in both estimates are not compared.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;
/// Largest accepted relative error.
pub const MAX_REL_ERROR: f64 = 1e-3;

const MIN_DEPTH_GAP: f64 = 1e-4;
const MIN_TRANSMITTANCE_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckScene {
    pub object: GaussianObject,
    pub pose: SE3Pose,
    pub intrinsics: CameraIntrinsics,
    pub query: RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub n_gaussians: usize,
    pub loss: f64,
    /// `(q0..q3, t0..t2)`.
    pub analytic: [f64; 7],
    pub numeric: [f64; 7],
    pub max_rel_error: f64,
}

// Mahalanobis distance is convex, so its maximum over the frame's pixel
// centers is attained at a corner.
fn above_threshold_everywhere(obj: &GaussianObject, pose: &SE3Pose, k: &CameraIntrinsics) -> Result<bool> {
    let (w, h) = ((k.width - 1) as f64, (k.height - 1) as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    for i in 0..obj.len() {
        let cov = compute_cov3d(obj.orientations[i], &obj.scales[i])?;
        let Some(p) = project_gaussian(&obj.means[i], &cov, pose, k) else {
            return Ok(false);
        };
        let Some(inv) = p.cov2d.try_inverse() else {
            return Ok(false);
        };
        for &(x, y) in &corners {
            let d = Vector2::new(x, y) - p.center;
            if obj.opacities[i] * (-0.5 * d.dot(&(inv * d))).exp() < 1.05 * MIN_ALPHA {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Seeded degree-0 scene of 5 to 50 Gaussians at 64x64 with a query rendered
/// under a small rigid offset.
pub fn gradcheck_scene(seed: u64) -> Result<GradcheckScene> {
    let s = CHECK_SIZE as f64;
    let k = CameraIntrinsics::new(2.5 * s, 2.5 * s, s / 2.0, s / 2.0, CHECK_SIZE, CHECK_SIZE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RenderOptions::default();
    loop {
        let n = rng.random_range(5..=50);
        let means = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03)))
            .collect();
        let orientations = (0..n).map(|_| random_unit_quat(&mut rng)).collect();
        let scales = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(0.07..0.12)))
            .collect();
        let opacities = (0..n).map(|_| rng.random_range(0.02..0.2)).collect();
        let sh = (0..n * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let object = GaussianObject::new(means, orientations, scales, opacities, sh, 0)?;
        let axis = Vector3::from_fn(|_, _| rng.random::<f64>() - 0.5);
        let pose = SE3Pose {
            rotation: RotationMatrix::from_axis_angle(&axis, rng.random_range(0.0..3.0))?,
            translation: Vector3::new(0.0, 0.0, 0.35),
        };
        if !above_threshold_everywhere(&object, &pose, &k)? {
            continue;
        }
        let (_, saved) = render(&object, &pose, &k, &opts)?;
        if saved.transmittance().iter().any(|&t| t < MIN_TRANSMITTANCE_MARGIN) {
            continue;
        }
        let mut depths = saved.depths();
        depths.sort_by(f64::total_cmp);
        if depths.windows(2).any(|w| w[1] - w[0] < MIN_DEPTH_GAP) {
            continue;
        }
        let offset = TransformParams {
            q: [0.995, 0.05, -0.06, 0.04],
            t: [0.006, -0.004, 0.01],
        };
        let moved = rigid_transform_object(&object, &offset, false)?;
        let (query, _) = render(&moved, &pose, &k, &opts)?;
        return Ok(GradcheckScene {
            object,
            pose,
            intrinsics: k,
            query: query.rgb,
        });
    }
}

/// Analytic versus central-difference gradient at the identity delta.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let scene = gradcheck_scene(seed)?;
    let cfg = RefinementConfig::default();
    let (obj, pose, k, query) = (&scene.object, &scene.pose, &scene.intrinsics, &scene.query);
    let delta = TransformParams::identity();
    let (loss, dq, dt) = loss_and_gradient(obj, pose, &delta, query, k, &cfg)?;
    let analytic = [dq[0], dq[1], dq[2], dq[3], dt[0], dt[1], dt[2]];
    let mut numeric = [0.0; 7];
    let mut max_rel_error = 0.0f64;
    for i in 0..7 {
        let (mut plus, mut minus) = (delta, delta);
        if i < 4 {
            plus.q[i] += FD_STEP;
            minus.q[i] -= FD_STEP;
        } else {
            plus.t[i - 4] += FD_STEP;
            minus.t[i - 4] -= FD_STEP;
        }
        let lp = loss_at(obj, pose, &plus, query, k, &cfg)?;
        let lm = loss_at(obj, pose, &minus, query, k, &cfg)?;
        numeric[i] = (lp - lm) / (2.0 * FD_STEP);
        let scale = numeric[i].abs().max(analytic[i].abs());
        if scale > MAGNITUDE_FLOOR {
            max_rel_error = max_rel_error.max((numeric[i] - analytic[i]).abs() / scale);
        }
    }
    Ok(GradcheckReport {
        seed,
        n_gaussians: obj.len(),
        loss,
        analytic,
        numeric,
        max_rel_error,
    })
}
