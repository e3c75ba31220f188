use nalgebra::{Matrix2, Matrix2x3, Vector3};
use rayon::prelude::*;

use super::{splat_alpha, RenderSaved};
use crate::error::{Error, Result};
use crate::gaussian::GaussianObject;
use crate::geometry::TransformParams;
use crate::image::RgbImage;

/// Gradient slots accumulated per (tile, splat) entry:
/// d center x, d center y, d conic (q00, q01, q11).
type EntryGrad = [f64; 5];

/// Gradient of the loss with respect to every primitive's world-frame mean,
/// given the gradient `d_image` of the loss with respect to the rendered RGB.
///
/// View-dependent color is treated as constant. Primitives that were culled
/// get a zero gradient.
pub fn render_backward(saved: &RenderSaved, d_image: &RgbImage) -> Result<Vec<Vector3<f64>>> {
    if d_image.width != saved.width || d_image.height != saved.height {
        return Err(Error::shape(format!(
            "d_image is {}x{}, render was {}x{}",
            d_image.width, d_image.height, saved.width, saved.height
        )));
    }
    if d_image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("d_image has non-finite values"));
    }
    let (width, height, tile) = (saved.width, saved.height, saved.tile_size);
    let tiles_x = width.div_ceil(tile);
    let bg = saved.background;
    let hot = &saved.hot;

    let per_tile: Vec<Vec<EntryGrad>> = saved
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut grads = vec![[0.0; 5]; list.len()];
            if list.is_empty() {
                return grads;
            }
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            for y in ty * tile..((ty + 1) * tile).min(height) {
                for x in tx * tile..((tx + 1) * tile).min(width) {
                    let pix = y * width + x;
                    let n = saved.n_contrib[pix] as usize;
                    let dpix = &d_image.data[pix * 3..pix * 3 + 3];
                    if n == 0 || dpix.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let t_final = saved.final_t[pix];
                    let bg_dot = bg[0] * dpix[0] + bg[1] * dpix[1] + bg[2] * dpix[2];
                    let (px, py) = (x as f64, y as f64);
                    let mut t_cur = t_final;
                    let mut accum = [0.0; 3];
                    let mut last_alpha = 0.0;
                    let mut last_color = [0.0; 3];
                    for k in (0..n).rev() {
                        let s = &hot[list[k] as usize];
                        let Some((alpha, g, dx, dy, capped)) = splat_alpha(s, px, py) else {
                            continue;
                        };
                        t_cur /= 1.0 - alpha;
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            accum[c] = last_alpha * last_color[c] + (1.0 - last_alpha) * accum[c];
                            d_alpha += (s.color[c] - accum[c]) * dpix[c];
                        }
                        d_alpha *= t_cur;
                        d_alpha -= t_final / (1.0 - alpha) * bg_dot;
                        last_alpha = alpha;
                        last_color = s.color;
                        if capped {
                            continue;
                        }
                        // alpha = opacity * g, g = exp(power)
                        let d_power = d_alpha * s.opacity * g;
                        let e = &mut grads[k];
                        // power = -0.5 (q00 dx^2 + q11 dy^2) - q01 dx dy, d = pixel - center
                        e[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                        e[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                        e[2] += d_power * (-0.5 * dx * dx);
                        e[3] += d_power * (-dx * dy);
                        e[4] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            grads
        })
        .collect();

    // fixed-order reduction keeps the result independent of thread count
    let mut splat_grads = vec![[0.0; 5]; hot.len()];
    for (list, grads) in saved.tiles.iter().zip(&per_tile) {
        for (&idx, g) in list.iter().zip(grads) {
            let acc = &mut splat_grads[idx as usize];
            for i in 0..5 {
                acc[i] += g[i];
            }
        }
    }

    let k = &saved.intrinsics;
    let w_t = saved.pose.rotation.matrix().transpose();
    let per_splat: Vec<(usize, Vector3<f64>)> = saved
        .aux
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(aux, g)| {
            let [a, b, c] = aux.cov2d;
            let det = a * c - b * b;
            let inv_det2 = 1.0 / (det * det);
            let (dq00, dq01, dq11) = (g[2], g[3], g[4]);
            // conic = (c, -b, a) / det
            let d_a = inv_det2 * (-c * c * dq00 + b * c * dq01 - b * b * dq11);
            let d_b = inv_det2 * (2.0 * b * c * dq00 - (a * c + b * b) * dq01 + 2.0 * a * b * dq11);
            let d_c = inv_det2 * (-b * b * dq00 + a * b * dq01 - a * a * dq11);
            let g_sym = Matrix2::new(d_a, 0.5 * d_b, 0.5 * d_b, d_c);

            let m = aux.m_cam;
            let (iz, iz2) = (1.0 / m.z, 1.0 / (m.z * m.z));
            let iz3 = iz2 * iz;
            let j = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * m.x * iz2, 0.0, k.fy * iz, -k.fy * m.y * iz2);
            let d_j = 2.0 * g_sym * j * aux.cov_cam;

            let mut d_m = Vector3::zeros();
            // center: u = fx x / z + cx, v = fy y / z + cy
            d_m.x += g[0] * k.fx * iz;
            d_m.y += g[1] * k.fy * iz;
            d_m.z += -g[0] * k.fx * m.x * iz2 - g[1] * k.fy * m.y * iz2;
            // jacobian entries
            d_m.x += d_j[(0, 2)] * (-k.fx * iz2);
            d_m.y += d_j[(1, 2)] * (-k.fy * iz2);
            d_m.z += d_j[(0, 0)] * (-k.fx * iz2)
                + d_j[(0, 2)] * (2.0 * k.fx * m.x * iz3)
                + d_j[(1, 1)] * (-k.fy * iz2)
                + d_j[(1, 2)] * (2.0 * k.fy * m.y * iz3);
            (aux.index, w_t * d_m)
        })
        .collect();

    let mut d_means = vec![Vector3::zeros(); saved.n_primitives];
    for (i, g) in per_splat {
        d_means[i] = g;
    }
    Ok(d_means)
}

/// Derivatives of `R(q_hat) * mu` with respect to the four components of the
/// unit quaternion `q_hat`, as columns.
fn rotated_point_jacobian(q: [f64; 4], mu: &Vector3<f64>) -> [Vector3<f64>; 4] {
    let [w, x, y, z] = q;
    let (a, b, c) = (mu.x, mu.y, mu.z);
    [
        2.0 * Vector3::new(-z * b + y * c, z * a - x * c, -y * a + x * b),
        2.0 * Vector3::new(y * b + z * c, y * a - 2.0 * x * b - w * c, z * a + w * b - 2.0 * x * c),
        2.0 * Vector3::new(-2.0 * y * a + x * b + w * c, x * a + z * c, -w * a + z * b - 2.0 * y * c),
        2.0 * Vector3::new(-2.0 * z * a - w * b + x * c, w * a - 2.0 * z * b + y * c, x * a + y * b),
    ]
}

/// Chain rule from world-mean gradients to the raw pose delta, through
/// `mu_w = R(q / |q|) mu + t`. `obj` is the untransformed object.
pub fn pose_gradient(
    d_means: &[Vector3<f64>],
    obj: &GaussianObject,
    delta: &TransformParams,
) -> Result<([f64; 4], [f64; 3])> {
    if d_means.len() != obj.len() {
        return Err(Error::shape(format!(
            "{} mean gradients for {} primitives",
            d_means.len(),
            obj.len()
        )));
    }
    let norm = delta.q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::DegenerateQuaternion);
    }
    let q_hat = delta.q.map(|v| v / norm);
    let mut dt = Vector3::zeros();
    let mut g_hat = [0.0; 4];
    for (mu, d) in obj.means.iter().zip(d_means) {
        dt += d;
        let cols = rotated_point_jacobian(q_hat, mu);
        for (gk, col) in g_hat.iter_mut().zip(&cols) {
            *gk += col.dot(d);
        }
    }
    // d q_hat / d q = (I - q_hat q_hat^T) / |q|
    let radial: f64 = g_hat.iter().zip(&q_hat).map(|(g, q)| g * q).sum();
    let dq = std::array::from_fn(|i| (g_hat[i] - radial * q_hat[i]) / norm);
    Ok((dq, dt.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_to_rotation;

    #[test]
    fn rotated_point_jacobian_matches_finite_differences() {
        let q = [0.8, -0.2, 0.5, 0.26];
        let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let q = q.map(|v| v / n);
        let mu = Vector3::new(0.3, -0.7, 1.1);
        // extension of R(q) that is polynomial in q (no normalization)
        let rot = |q: [f64; 4]| {
            let [w, x, y, z] = q;
            nalgebra::Matrix3::new(
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
        };
        let cols = rotated_point_jacobian(q, &mu);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (rot(qp) * mu - rot(qm) * mu) / (2.0 * h);
            assert!((fd - cols[k]).norm() < 1e-8, "component {k}");
        }
    }

    #[test]
    fn pose_gradient_trivial_cases() {
        let obj = crate::gaussian::synth_object(4, 10, 0.1, 0).unwrap();
        let delta = TransformParams::identity();
        let zero = vec![Vector3::zeros(); 10];
        assert_eq!(pose_gradient(&zero, &obj, &delta).unwrap(), ([0.0; 4], [0.0; 3]));

        let d: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 1.0, -0.5 * i as f64)).collect();
        let (_, dt) = pose_gradient(&d, &obj, &delta).unwrap();
        let sum = d.iter().fold(Vector3::zeros(), |a, b| a + b);
        assert_eq!(Vector3::from(dt), sum);
        assert!(pose_gradient(&d[..3], &obj, &delta).is_err());
    }

    #[test]
    fn pose_gradient_matches_linear_functional() {
        // L = sum_i d_i . (R(q/|q|) mu_i + t) has exactly this gradient
        let obj = crate::gaussian::synth_object(8, 7, 0.3, 0).unwrap();
        let d: Vec<_> = (0..7)
            .map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.7).cos(), 0.3 - 0.1 * i as f64))
            .collect();
        let delta = TransformParams {
            q: [1.3, 0.2, -0.4, 0.1],
            t: [0.01, 0.02, 0.03],
        };
        let loss = |q: [f64; 4]| -> f64 {
            let r = quat_to_rotation(q).unwrap();
            obj.means.iter().zip(&d).map(|(m, di)| di.dot(&(r.matrix() * m))).sum()
        };
        let (dq, _) = pose_gradient(&d, &obj, &delta).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = delta.q;
            let mut qm = delta.q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (loss(qp) - loss(qm)) / (2.0 * h);
            assert!((fd - dq[k]).abs() < 1e-8, "component {k}: {fd} vs {}", dq[k]);
        }
    }
}
