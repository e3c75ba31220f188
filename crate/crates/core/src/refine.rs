//! Render-and-compare pose refinement.
//!
//! A rigid delta `(q, t)` starts at identity and is applied to the object's
//! means before rendering at the initial pose. Each step renders, scores the
//! image against the segmented query, backpropagates to `(q, t)` and takes an
//! AdamW step under a linear warm-up followed by cosine annealing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{rigid_transform_object, GaussianObject};
use crate::geometry::{compose_pose, CameraIntrinsics, SE3Pose, TransformParams};
use crate::image::RgbImage;
use crate::losses::{gs_loss_with, LossTerms};
use crate::render::{pose_gradient, render, render_backward, RenderOptions};

/// How the early-stop test reads the loss sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopRule {
    /// Moving average of `|loss_t - loss_{t-1}|` below `eta`.
    #[default]
    LossChange,
    /// The loss itself below `eta`.
    AbsoluteLoss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub eta: f64,
    /// Consecutive steps the stop test must hold; `None` disables early stop.
    pub patience: Option<usize>,
    pub stop_rule: StopRule,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub transform_covariance: bool,
    pub loss_terms: LossTerms,
    pub render: RenderOptions,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-3,
            lr_min: 1e-6,
            max_steps: 400,
            warmup_steps: 10,
            eta: 1e-4,
            patience: Some(10),
            stop_rule: StopRule::LossChange,
            ema_decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            transform_covariance: false,
            loss_terms: LossTerms::Combined,
            render: RenderOptions::default(),
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::invalid("need 0 < lr_min <= lr0"));
        }
        if self.warmup_steps >= self.max_steps {
            return Err(Error::invalid("warm-up must be shorter than max_steps"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::invalid("eta must be nonnegative"));
        }
        Ok(())
    }
}

/// Linear warm-up to `lr0`, then cosine annealing down to `lr_min` at the
/// last step.
pub fn schedule_lr(step: usize, cfg: &RefinementConfig) -> Result<f64> {
    if step >= cfg.max_steps {
        return Err(Error::invalid(format!(
            "step {step} outside 0..{}",
            cfg.max_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr0 * (step + 1) as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.max_steps - 1 - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.lr0);
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW moments for the seven pose parameters `(q, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdamState {
    pub m: [f64; 7],
    pub v: [f64; 7],
    pub step: u64,
}

fn pack(p: &TransformParams) -> [f64; 7] {
    [p.q[0], p.q[1], p.q[2], p.q[3], p.t[0], p.t[1], p.t[2]]
}

fn unpack(x: &[f64; 7]) -> TransformParams {
    TransformParams {
        q: [x[0], x[1], x[2], x[3]],
        t: [x[4], x[5], x[6]],
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(
    state: &AdamState,
    params: &TransformParams,
    grads: ([f64; 4], [f64; 3]),
    lr: f64,
    cfg: &RefinementConfig,
) -> Result<(AdamState, TransformParams)> {
    let g = [
        grads.0[0], grads.0[1], grads.0[2], grads.0[3], grads.1[0], grads.1[1], grads.1[2],
    ];
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(state.step as usize));
    }
    let mut next = *state;
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut x = pack(params);
    for i in 0..7 {
        next.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        next.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        x[i] -= lr * cfg.weight_decay * x[i];
        x[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok((next, unpack(&x)))
}

/// One traced refinement step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub q: [f64; 4],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefinementTrace {
    pub rows: Vec<TraceRow>,
    pub early_stopped: bool,
}

impl RefinementTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,lr,loss,grad_norm,qw,qx,qy,qz,tx,ty,tz")?;
        for r in &self.rows {
            let vals = [
                r.lr,
                r.loss,
                r.grad_norm,
                r.q[0],
                r.q[1],
                r.q[2],
                r.q[3],
                r.t[0],
                r.t[1],
                r.t[2],
            ];
            let cols: Vec<String> = vals.iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(w, "{},{}", r.step, cols.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Loss of the object moved by `delta` and rendered at `p_init`, with its
/// gradient with respect to the raw `(q, t)`.
pub fn loss_and_gradient(
    obj: &GaussianObject,
    p_init: &SE3Pose,
    delta: &TransformParams,
    query: &RgbImage,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<(f64, [f64; 4], [f64; 3])> {
    let moved = rigid_transform_object(obj, delta, cfg.transform_covariance)?;
    let (img, saved) = render(&moved, p_init, k, &cfg.render)?;
    let loss = gs_loss_with(&img.rgb, query, cfg.loss_terms)?;
    let d_means = render_backward(&saved, &loss.d_input)?;
    let (dq, dt) = pose_gradient(&d_means, obj, delta)?;
    Ok((loss.value, dq, dt))
}

/// Loss only, for finite-difference checks.
pub fn loss_at(
    obj: &GaussianObject,
    p_init: &SE3Pose,
    delta: &TransformParams,
    query: &RgbImage,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<f64> {
    let moved = rigid_transform_object(obj, delta, cfg.transform_covariance)?;
    let (img, _) = render(&moved, p_init, k, &cfg.render)?;
    Ok(gs_loss_with(&img.rgb, query, cfg.loss_terms)?.value)
}

/// Refines `p_init` against the segmented `query` rendered through `k`.
///
/// Returns `p_init * T(delta*)`, where `delta*` is the evaluated delta with
/// the lowest loss (earliest on ties), and the per-step trace. Early stopping
/// is only considered once warm-up is over.
pub fn refine(
    obj: &GaussianObject,
    p_init: &SE3Pose,
    query: &RgbImage,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<(SE3Pose, RefinementTrace)> {
    cfg.validate()?;
    if query.width != k.width as usize || query.height != k.height as usize {
        return Err(Error::shape(format!(
            "query is {}x{}, camera is {}x{}",
            query.width, query.height, k.width, k.height
        )));
    }
    let mut params = TransformParams::identity();
    let mut adam = AdamState::default();
    let mut trace = RefinementTrace::default();
    let mut prev_loss: Option<f64> = None;
    let mut ema: Option<f64> = None;
    let mut calm_steps = 0;
    let mut best = (f64::INFINITY, params);

    for step in 0..cfg.max_steps {
        let (loss, dq, dt) = loss_and_gradient(obj, p_init, &params, query, k, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        if loss < best.0 {
            best = (loss, params);
        }
        let grad_norm = dq.iter().chain(&dt).map(|v| v * v).sum::<f64>().sqrt();
        let lr = schedule_lr(step, cfg)?;
        trace.rows.push(TraceRow {
            step,
            lr,
            loss,
            grad_norm,
            q: params.q,
            t: params.t,
        });
        let (next_state, next_params) =
            adamw_step(&adam, &params, (dq, dt), lr, cfg).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteGradient(step),
                other => other,
            })?;
        adam = next_state;
        params = next_params;

        let signal = match cfg.stop_rule {
            StopRule::AbsoluteLoss => Some(loss),
            StopRule::LossChange => prev_loss.map(|p| {
                let change = (loss - p).abs();
                let smoothed = match ema {
                    Some(e) => cfg.ema_decay * e + (1.0 - cfg.ema_decay) * change,
                    None => change,
                };
                ema = Some(smoothed);
                smoothed
            }),
        };
        prev_loss = Some(loss);
        if let (Some(patience), Some(signal)) = (cfg.patience, signal) {
            if step >= cfg.warmup_steps && signal < cfg.eta {
                calm_steps += 1;
                if calm_steps >= patience.max(1) {
                    trace.early_stopped = true;
                    break;
                }
            } else {
                calm_steps = 0;
            }
        }
    }
    Ok((compose_pose(p_init, &best.1)?, trace))
}
