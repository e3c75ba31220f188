//! Windowed SSIM on single planes with gradients through the window
//! statistics.

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut g = [0.0; WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.map(|v| v / sum)
}

/// Row-major single-channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    /// 2x2 average pooling; a trailing odd row or column is dropped.
    pub fn downsample(&self) -> Plane {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let r0 = &self.data[(2 * y) * self.width..];
            let r1 = &self.data[(2 * y + 1) * self.width..];
            for x in 0..w {
                out[y * w + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
        Plane::new(w, h, out)
    }

    /// Adjoint of [`Plane::downsample`] back onto a `width x height` grid.
    pub fn downsample_adjoint(&self, width: usize, height: usize) -> Plane {
        let mut out = vec![0.0; width * height];
        for y in 0..self.height {
            for x in 0..self.width {
                let g = 0.25 * self.data[y * self.width + x];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out[(2 * y + dy) * width + 2 * x + dx] += g;
                }
            }
        }
        Plane::new(width, height, out)
    }
}

/// Separable "valid" correlation with the SSIM window.
fn filter_valid(src: &[f64], width: usize, height: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let ow = width - WINDOW + 1;
    let oh = height - WINDOW + 1;
    let mut tmp = vec![0.0; ow * height];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let out = &mut tmp[y * ow..(y + 1) * ow];
        for (k, &gk) in g.iter().enumerate() {
            for (o, s) in out.iter_mut().zip(&row[k..k + ow]) {
                *o += gk * s;
            }
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        let dst = &mut out[y * ow..(y + 1) * ow];
        for (k, &gk) in g.iter().enumerate() {
            let row = &tmp[(y + k) * ow..(y + k + 1) * ow];
            for (o, s) in dst.iter_mut().zip(row) {
                *o += gk * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to full size.
fn filter_valid_adjoint(src: &[f64], width: usize, height: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let ow = width - WINDOW + 1;
    let oh = height - WINDOW + 1;
    let mut tmp = vec![0.0; ow * height];
    for y in 0..oh {
        let row = &src[y * ow..(y + 1) * ow];
        for (k, &gk) in g.iter().enumerate() {
            let dst = &mut tmp[(y + k) * ow..(y + k + 1) * ow];
            for (o, s) in dst.iter_mut().zip(row) {
                *o += gk * s;
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let row = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * width..(y + 1) * width];
        for (k, &gk) in g.iter().enumerate() {
            for (o, s) in dst[k..k + ow].iter_mut().zip(row) {
                *o += gk * s;
            }
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure of one plane pair, optionally with
/// the per-window partials needed for gradients.
#[derive(Debug, Clone)]
pub struct PlaneSsim {
    pub ssim: f64,
    pub cs: f64,
    maps: Option<GradMaps>,
}

#[derive(Debug, Clone)]
struct GradMaps {
    width: usize,
    height: usize,
    // partials of mean SSIM / mean cs with respect to mu_x, E[x^2], E[xy]
    s_mu: Vec<f64>,
    s_xx: Vec<f64>,
    s_xy: Vec<f64>,
    c_mu: Vec<f64>,
    c_xx: Vec<f64>,
    c_xy: Vec<f64>,
}

pub fn plane_ssim(x: &Plane, y: &Plane, with_grad: bool) -> PlaneSsim {
    let (w, h) = (x.width, x.height);
    debug_assert!(w >= WINDOW && h >= WINDOW);
    let g = gaussian_window();
    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(&x.data, w, h, &g);
    let mu_y = filter_valid(&y.data, w, h, &g);
    let e_xx = filter_valid(&xx, w, h, &g);
    let e_yy = filter_valid(&yy, w, h, &g);
    let e_xy = filter_valid(&xy, w, h, &g);
    let n = mu_x.len();
    let inv_n = 1.0 / n as f64;

    let mut maps = with_grad.then(|| GradMaps {
        width: w,
        height: h,
        s_mu: vec![0.0; n],
        s_xx: vec![0.0; n],
        s_xy: vec![0.0; n],
        c_mu: vec![0.0; n],
        c_xx: vec![0.0; n],
        c_xy: vec![0.0; n],
    });
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let sxx = e_xx[p] - mx * mx;
        let syy = e_yy[p] - my * my;
        let sxy = e_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + C1;
        let b1 = mx * mx + my * my + C1;
        let a2 = 2.0 * sxy + C2;
        let b2 = sxx + syy + C2;
        let cs = a2 / b2;
        let s = a1 * a2 / (b1 * b2);
        ssim_sum += s;
        cs_sum += cs;
        if let Some(m) = maps.as_mut() {
            m.s_mu[p] = inv_n * (2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2));
            m.s_xx[p] = inv_n * (-s / b2);
            m.s_xy[p] = inv_n * (2.0 * a1 / (b1 * b2));
            m.c_mu[p] = inv_n * (2.0 * mx * cs - 2.0 * my) / b2;
            m.c_xx[p] = inv_n * (-cs / b2);
            m.c_xy[p] = inv_n * (2.0 / b2);
        }
    }
    PlaneSsim {
        ssim: ssim_sum * inv_n,
        cs: cs_sum * inv_n,
        maps,
    }
}

impl PlaneSsim {
    /// Gradient of `a_ssim * ssim + a_cs * cs` with respect to `x`.
    ///
    /// # Panics
    /// If the statistics were computed without gradients.
    pub fn gradient(&self, x: &Plane, y: &Plane, a_ssim: f64, a_cs: f64) -> Vec<f64> {
        let m = self.maps.as_ref().expect("computed with gradients");
        let (w, h) = (m.width, m.height);
        let g = gaussian_window();
        let mix = |s: &[f64], c: &[f64]| -> Vec<f64> { s.iter().zip(c).map(|(s, c)| a_ssim * s + a_cs * c).collect() };
        let a = filter_valid_adjoint(&mix(&m.s_mu, &m.c_mu), w, h, &g);
        let b = filter_valid_adjoint(&mix(&m.s_xx, &m.c_xx), w, h, &g);
        let c = filter_valid_adjoint(&mix(&m.s_xy, &m.c_xy), w, h, &g);
        (0..w * h)
            .map(|i| a[i] + 2.0 * x.data[i] * b[i] + y.data[i] * c[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(g[i], g[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn filter_adjoint_identity() {
        // <F a, b> == <a, F^T b>
        let (w, h) = (17, 13);
        let g = gaussian_window();
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let b: Vec<f64> = (0..(w - 10) * (h - 10)).map(|i| ((i * 53 % 97) as f64) / 97.0 - 0.5).collect();
        let fa = filter_valid(&a, w, h, &g);
        let ftb = filter_valid_adjoint(&b, w, h, &g);
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&ftb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pooling_adjoint_identity() {
        let a = Plane::new(7, 5, (0..35).map(|i| i as f64 * 0.1).collect());
        let b = Plane::new(3, 2, vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0]);
        let lhs: f64 = a.downsample().data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        let adj = b.downsample_adjoint(7, 5);
        let rhs: f64 = a.data.iter().zip(&adj.data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
