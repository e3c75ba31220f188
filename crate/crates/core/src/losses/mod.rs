//! Structural-similarity losses for render-and-compare.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with valid padding, is
//! computed per channel and averaged. MS-SSIM multiplies the mean
//! contrast-structure term of every level but the coarsest with the full
//! SSIM of the coarsest level, each raised to its level weight.

pub mod ssim;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use ssim::{plane_ssim, Plane, PlaneSsim, WINDOW};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Loss value with its gradient with respect to the rendered image.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub d_input: RgbImage,
}

/// Which dissimilarity terms make up the refinement objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossTerms {
    #[default]
    Combined,
    SsimOnly,
    MsSsimOnly,
}

fn check_pair(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {WINDOW}x{WINDOW} window",
            a.width, a.height
        )));
    }
    Ok(())
}

fn planes(img: &RgbImage) -> [Plane; 3] {
    std::array::from_fn(|c| Plane::new(img.width, img.height, img.channel(c)))
}

fn interleave(width: usize, height: usize, grads: &[Vec<f64>]) -> RgbImage {
    let mut out = RgbImage::zeros(width, height);
    for (c, g) in grads.iter().enumerate() {
        for (i, v) in g.iter().enumerate() {
            out.data[i * 3 + c] = *v;
        }
    }
    out
}

/// Per-channel SSIM and MS-SSIM sharing the finest-level statistics.
/// Returns values and gradients scaled by `a_ssim` and `a_ms`.
fn plane_losses(x: &Plane, y: &Plane, weights: &[f64], a_ssim: f64, a_ms: f64) -> (f64, f64, Vec<f64>) {
    let levels = weights.len();
    let mut xs = vec![x.clone()];
    let mut ys = vec![y.clone()];
    if a_ms != 0.0 {
        for _ in 1..levels {
            let nx = xs.last().unwrap().downsample();
            let ny = ys.last().unwrap().downsample();
            xs.push(nx);
            ys.push(ny);
        }
    }
    let stats: Vec<PlaneSsim> = xs.iter().zip(&ys).map(|(a, b)| plane_ssim(a, b, true)).collect();
    let ssim = stats[0].ssim;
    if a_ms == 0.0 {
        return (ssim, 0.0, stats[0].gradient(x, y, a_ssim, 0.0));
    }

    // term j: cs at fine levels, full ssim at the coarsest; clamped at zero
    let raw: Vec<f64> = (0..levels)
        .map(|j| if j + 1 == levels { stats[j].ssim } else { stats[j].cs })
        .collect();
    let terms: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let ms: f64 = terms.iter().zip(weights).map(|(t, w)| t.powf(*w)).product();

    let mut acc: Option<Plane> = None;
    for j in (0..levels).rev() {
        let factor = if raw[j] > 0.0 {
            let others: f64 = terms
                .iter()
                .zip(weights)
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, (t, w))| t.powf(*w))
                .product();
            a_ms * weights[j] * terms[j].powf(weights[j] - 1.0) * others
        } else {
            0.0
        };
        let coarsest = j + 1 == levels;
        let (mut f_ssim, f_cs) = if coarsest { (factor, 0.0) } else { (0.0, factor) };
        if j == 0 {
            f_ssim += a_ssim;
        }
        let mut g = if f_ssim != 0.0 || f_cs != 0.0 {
            stats[j].gradient(&xs[j], &ys[j], f_ssim, f_cs)
        } else {
            vec![0.0; xs[j].width * xs[j].height]
        };
        if let Some(coarse) = acc.take() {
            let up = coarse.downsample_adjoint(xs[j].width, xs[j].height);
            for (o, u) in g.iter_mut().zip(&up.data) {
                *o += u;
            }
        }
        acc = Some(Plane::new(xs[j].width, xs[j].height, g));
    }
    (ssim, ms, acc.unwrap().data)
}

/// Channel-averaged SSIM and MS-SSIM with the gradient of
/// `a_ssim * SSIM + a_ms * MS-SSIM`.
fn combined(rendered: &RgbImage, target: &RgbImage, a_ssim: f64, a_ms: f64) -> Result<(f64, f64, RgbImage)> {
    check_pair(rendered, target)?;
    let weights = ms_ssim_weights(ms_ssim_levels(rendered.width, rendered.height));
    let (x, y) = (planes(rendered), planes(target));
    let per: Vec<_> = (0..3)
        .into_par_iter()
        .map(|c| plane_losses(&x[c], &y[c], &weights, a_ssim / 3.0, a_ms / 3.0))
        .collect();
    let ssim = per.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let ms = per.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let grads: Vec<Vec<f64>> = per.into_iter().map(|p| p.2).collect();
    Ok((ssim, ms, interleave(rendered.width, rendered.height, &grads)))
}

/// Mean SSIM of `rendered` against `target` and its gradient with respect to
/// `rendered`.
pub fn ssim_with_grad(rendered: &RgbImage, target: &RgbImage) -> Result<(f64, RgbImage)> {
    let (s, _, g) = combined(rendered, target, 1.0, 0.0)?;
    Ok((s, g))
}

/// Number of pyramid levels that fit: every level must still hold a window.
pub fn ms_ssim_levels(width: usize, height: usize) -> usize {
    let mut s = width.min(height);
    let mut levels = 0;
    while levels < MS_SSIM_WEIGHTS.len() && s >= WINDOW {
        levels += 1;
        s /= 2;
    }
    levels
}

/// Level weights for a pyramid of `levels`, renormalized to sum to one.
pub fn ms_ssim_weights(levels: usize) -> Vec<f64> {
    let used = &MS_SSIM_WEIGHTS[..levels];
    let sum: f64 = used.iter().sum();
    used.iter().map(|w| w / sum).collect()
}

/// Multi-scale SSIM of `rendered` against `target` and its gradient with
/// respect to `rendered`. Levels shrink to fit small images.
pub fn ms_ssim_with_grad(rendered: &RgbImage, target: &RgbImage) -> Result<(f64, RgbImage)> {
    let (_, m, g) = combined(rendered, target, 0.0, 1.0)?;
    Ok((m, g))
}

/// `(1 - SSIM) + (1 - MS-SSIM)` and its gradient.
pub fn gs_loss(rendered: &RgbImage, target: &RgbImage) -> Result<LossValue> {
    gs_loss_with(rendered, target, LossTerms::Combined)
}

pub fn gs_loss_with(rendered: &RgbImage, target: &RgbImage, terms: LossTerms) -> Result<LossValue> {
    let (a_ssim, a_ms) = match terms {
        LossTerms::Combined => (1.0, 1.0),
        LossTerms::SsimOnly => (1.0, 0.0),
        LossTerms::MsSsimOnly => (0.0, 1.0),
    };
    // gradient of the loss is the negated gradient of the similarities
    let (s, m, g) = combined(rendered, target, -a_ssim, -a_ms)?;
    let mut value = 0.0;
    if a_ssim != 0.0 {
        value += 1.0 - s;
    }
    if a_ms != 0.0 {
        value += 1.0 - m;
    }
    Ok(LossValue { value, d_input: g })
}
