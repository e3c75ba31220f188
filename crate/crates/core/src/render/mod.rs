//! Differentiable 3D Gaussian splatting under a pinhole camera.
//!
//! The forward pass projects every primitive with the EWA approximation,
//! sorts by camera depth (ties by primitive index), bins splats into 16x16
//! pixel tiles and composites front to back. [`render_backward`] replays the
//! compositing in reverse to get loss gradients with respect to the world
//! means, and [`pose_gradient`] pulls those back onto the pose delta.

mod backward;

pub use backward::{pose_gradient, render_backward};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::GaussianObject;
use crate::geometry::{quat_to_rotation, CameraIntrinsics, SE3Pose};
use crate::image::{GrayImage, RgbImage};

pub const Z_NEAR: f64 = 0.01;
pub const COV2D_DILATION: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const MIN_COV_DET: f64 = 1e-12;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    pub alpha: GrayImage,
}

/// Image-plane footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub center: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// World covariance `R(r) diag(s)^2 R(r)^T`.
pub fn compute_cov3d(r: [f64; 4], s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("scales must be positive"));
    }
    let rm = *quat_to_rotation(r)?.matrix();
    let m = rm * Matrix3::from_diagonal(s);
    Ok(m * m.transpose())
}

fn projection_jacobian(m: &Vector3<f64>, k: &CameraIntrinsics) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / m.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * m.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * m.y * iz2,
    )
}

/// EWA projection of a world-frame Gaussian; `None` when it lies in front of
/// the near plane.
pub fn project_gaussian(
    mean: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> Option<ProjectedGaussian> {
    let w = pose.rotation.matrix();
    let m = w * mean + pose.translation;
    if m.z <= Z_NEAR {
        return None;
    }
    let j = projection_jacobian(&m, k);
    let cov2d = j * (w * cov3d * w.transpose()) * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    Some(ProjectedGaussian {
        center: Vector2::new(k.fx * m.x / m.z + k.cx, k.fy * m.y / m.z + k.cy),
        cov2d,
        depth: m.z,
    })
}

/// Decodes view-dependent color from `3 x B` coefficients (channel-major).
pub fn eval_sh(coeffs: &[f64], dir: &Vector3<f64>) -> Result<[f64; 3]> {
    let b = coeffs.len() / 3;
    if coeffs.len() % 3 != 0 || !matches!(b, 1 | 4 | 9 | 16) {
        return Err(Error::invalid(format!(
            "{} SH coefficients is not 3 x (1, 4, 9 or 16)",
            coeffs.len()
        )));
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut basis = [0.0; 16];
    basis[0] = SH_C0;
    if b > 1 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    if b > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis[4] = SH_C2[0] * x * y;
        basis[5] = SH_C2[1] * y * z;
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        basis[7] = SH_C2[3] * x * z;
        basis[8] = SH_C2[4] * (xx - yy);
        if b > 9 {
            basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
            basis[10] = SH_C3[1] * x * y * z;
            basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            basis[14] = SH_C3[5] * z * (xx - yy);
            basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let ch = &coeffs[c * b..(c + 1) * b];
        let v: f64 = ch.iter().zip(&basis[..b]).map(|(h, y)| h * y).sum();
        *out = (v + 0.5).max(0.0);
    }
    Ok(rgb)
}

/// Fields read for every pixel a splat touches.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatHot {
    pub cx: f64,
    pub cy: f64,
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Below this exponent alpha is certainly under the skip threshold.
    pub min_power: f64,
}

/// Per-splat data needed only by the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatAux {
    pub index: usize,
    pub depth: f64,
    pub m_cam: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub cov2d: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]` outside of which the splat
    /// can never reach the 1/255 threshold.
    pub bounds: Option<[i64; 4]>,
}

/// Everything the backward pass needs to replay compositing.
#[derive(Debug, Clone)]
pub struct RenderSaved {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) tile_size: usize,
    pub(crate) background: [f64; 3],
    pub(crate) pose: SE3Pose,
    pub(crate) intrinsics: CameraIntrinsics,
    pub(crate) n_primitives: usize,
    pub(crate) hot: Vec<SplatHot>,
    pub(crate) aux: Vec<SplatAux>,
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) final_t: Vec<f64>,
    pub(crate) n_contrib: Vec<u32>,
}

impl RenderSaved {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of primitives that survived culling.
    pub fn visible_count(&self) -> usize {
        self.hot.len()
    }

    /// Projected centers in pixels, in depth order.
    pub fn centers(&self) -> Vec<Vector2<f64>> {
        self.hot.iter().map(|s| Vector2::new(s.cx, s.cy)).collect()
    }

    /// Camera depths in compositing order.
    pub fn depths(&self) -> Vec<f64> {
        self.aux.iter().map(|a| a.depth).collect()
    }

    /// Per-pixel transmittance left after compositing.
    pub fn transmittance(&self) -> &[f64] {
        &self.final_t
    }
}

/// Alpha of splat `s` at pixel `(px, py)` or `None` when skipped.
/// Returns `(alpha, gaussian, dx, dy, capped)` with `d = pixel - center`.
#[inline(always)]
pub(crate) fn splat_alpha(s: &SplatHot, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - s.cx;
    let dy = py - s.cy;
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > 0.0 || power < s.min_power {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    let capped = raw > MAX_ALPHA;
    let alpha = if capped { MAX_ALPHA } else { raw };
    if alpha < MIN_ALPHA {
        return None;
    }
    Some((alpha, g, dx, dy, capped))
}

struct PixelOut {
    rgb: [f64; 3],
    t: f64,
    n_contrib: u32,
}

#[inline]
fn composite(hot: &[SplatHot], list: impl Iterator<Item = usize>, px: f64, py: f64, bg: &[f64; 3]) -> PixelOut {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut n_contrib = 0;
    for (k, idx) in list.enumerate() {
        let s = &hot[idx];
        let Some((alpha, ..)) = splat_alpha(s, px, py) else {
            continue;
        };
        let test_t = t * (1.0 - alpha);
        if test_t < MIN_TRANSMITTANCE {
            break;
        }
        let w = alpha * t;
        for c in 0..3 {
            rgb[c] += s.color[c] * w;
        }
        t = test_t;
        n_contrib = k as u32 + 1;
    }
    for c in 0..3 {
        rgb[c] += t * bg[c];
    }
    PixelOut { rgb, t, n_contrib }
}

fn prepare(
    obj: &GaussianObject,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> Result<(Vec<SplatHot>, Vec<SplatAux>)> {
    k.validate()?;
    let w = pose.rotation.matrix();
    let cam_center = -(w.transpose() * pose.translation);
    let projected: Vec<Option<(SplatHot, SplatAux)>> = (0..obj.len())
        .into_par_iter()
        .map(|i| -> Result<Option<(SplatHot, SplatAux)>> {
            let mean = obj.means[i];
            let m = w * mean + pose.translation;
            if m.z <= Z_NEAR {
                return Ok(None);
            }
            let cov3d = compute_cov3d(obj.orientations[i], &obj.scales[i])?;
            let cov_cam = w * cov3d * w.transpose();
            let j = projection_jacobian(&m, k);
            let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_DILATION;
            let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
            let det = a * c - b * b;
            if !(det > MIN_COV_DET) {
                return Ok(None);
            }
            let conic = [c / det, -b / det, a / det];
            let cx = k.fx * m.x / m.z + k.cx;
            let cy = k.fy * m.y / m.z + k.cy;
            let dir = mean - cam_center;
            let n = dir.norm();
            let dir = if n > 0.0 { dir / n } else { Vector3::z() };
            let color = eval_sh(obj.sh(i), &dir)?.map(|v| v.min(1.0));
            let opacity = obj.opacities[i];
            // alpha < 1/255 beyond radius r where opacity * exp(-r^2 / (2 lambda_max)) = 1/255
            let bounds = if opacity * 255.0 > 1.0 {
                let mid = 0.5 * (a + c);
                let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
                let r = (2.0 * lambda_max * (opacity * 255.0).ln()).sqrt() + 1.0;
                Some([
                    (cx - r).floor() as i64,
                    (cx + r).ceil() as i64,
                    (cy - r).floor() as i64,
                    (cy + r).ceil() as i64,
                ])
            } else {
                None
            };
            Ok(Some((
                SplatHot {
                    cx,
                    cy,
                    conic,
                    opacity,
                    color,
                    // margin keeps the shortcut from deciding borderline cases
                    min_power: (MIN_ALPHA / opacity).ln() - 1e-6,
                },
                SplatAux {
                    index: i,
                    depth: m.z,
                    m_cam: m,
                    cov_cam,
                    cov2d: [a, b, c],
                    bounds,
                },
            )))
        })
        .collect::<Result<_>>()?;
    let mut splats: Vec<(SplatHot, SplatAux)> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.1.index.cmp(&b.1.index)));
    Ok(splats.into_iter().unzip())
}

fn bin_tiles(aux: &[SplatAux], width: usize, height: usize, tile: usize) -> Vec<Vec<u32>> {
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (idx, a) in aux.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = a.bounds else {
            continue;
        };
        let x0 = x0.max(0);
        let y0 = y0.max(0);
        let x1 = x1.min(width as i64 - 1);
        let y1 = y1.min(height as i64 - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / tile, x1 as usize / tile);
        let (ty0, ty1) = (y0 as usize / tile, y1 as usize / tile);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(idx as u32);
            }
        }
    }
    tiles
}

/// Renders `obj` seen from `pose` through `k` with tiled rasterization.
pub fn render(
    obj: &GaussianObject,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Result<(RenderedImage, RenderSaved)> {
    if opts.tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    let (hot, aux) = prepare(obj, pose, k)?;
    let (width, height) = (k.width as usize, k.height as usize);
    let tile = opts.tile_size;
    let tiles = bin_tiles(&aux, width, height, tile);
    let tiles_x = width.div_ceil(tile);
    let bg = opts.background;

    let per_tile: Vec<Vec<PixelOut>> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let x_end = ((tx + 1) * tile).min(width);
            let y_end = ((ty + 1) * tile).min(height);
            let mut out = Vec::with_capacity(tile * tile);
            for y in ty * tile..y_end {
                for x in tx * tile..x_end {
                    let ids = list.iter().map(|&i| i as usize);
                    out.push(composite(&hot, ids, x as f64, y as f64, &bg));
                }
            }
            out
        })
        .collect();

    let mut rgb = RgbImage::zeros(width, height);
    let mut alpha = vec![0.0; width * height];
    let mut final_t = vec![1.0; width * height];
    let mut n_contrib = vec![0u32; width * height];
    for (t, pixels) in per_tile.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x_end = ((tx + 1) * tile).min(width);
        let mut it = pixels.into_iter();
        for y in ty * tile..((ty + 1) * tile).min(height) {
            for x in tx * tile..x_end {
                let p = it.next().expect("one output per pixel");
                let i = y * width + x;
                rgb.data[i * 3..i * 3 + 3].copy_from_slice(&p.rgb);
                alpha[i] = 1.0 - p.t;
                final_t[i] = p.t;
                n_contrib[i] = p.n_contrib;
            }
        }
    }

    let image = RenderedImage {
        rgb,
        alpha: GrayImage {
            width,
            height,
            data: alpha,
        },
    };
    let saved = RenderSaved {
        width,
        height,
        tile_size: tile,
        background: bg,
        pose: *pose,
        intrinsics: *k,
        n_primitives: obj.len(),
        hot,
        aux,
        tiles,
        final_t,
        n_contrib,
    };
    Ok((image, saved))
}

/// Reference rasterizer: every pixel scans every projected splat in depth
/// order. Slow; kept to check the tiled path.
pub fn render_naive(
    obj: &GaussianObject,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    let (hot, _) = prepare(obj, pose, k)?;
    let (width, height) = (k.width as usize, k.height as usize);
    let mut rgb = RgbImage::zeros(width, height);
    let mut alpha = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let p = composite(&hot, 0..hot.len(), x as f64, y as f64, &opts.background);
            let i = y * width + x;
            rgb.data[i * 3..i * 3 + 3].copy_from_slice(&p.rgb);
            alpha[i] = 1.0 - p.t;
        }
    }
    Ok(RenderedImage {
        rgb,
        alpha: GrayImage {
            width,
            height,
            data: alpha,
        },
    })
}
