//! Stage-one motion estimators: persistence (zero flow), direct
//! minimization of the objective over the flow field, and the learned
//! motion head.

use crate::diff::gradient;
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::loss::{grad_total_loss, LossBreakdown, LossConfig};
use crate::mask::ConflictMask;
use crate::net::MotionNet;
use crate::warp::KernelConfig;

/// Produces the interval flow advancing a window's last frame one step.
/// Implementations are deterministic given their parameters and inputs.
pub trait MotionEstimator {
    fn estimate(&self, window: &[ScalarField]) -> Result<VectorField>;
}

/// Persistence baseline: no motion.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFlow;

impl MotionEstimator for ZeroFlow {
    fn estimate(&self, window: &[ScalarField]) -> Result<VectorField> {
        let last = window.last().ok_or(Error::EmptySequence)?;
        let (h, w) = last.shape();
        Ok(VectorField::zeros(h, w))
    }
}

/// Settings for the direct minimization of the objective over the flow.
#[derive(Clone, Copy, Debug)]
pub struct VariationalConfig {
    /// Gradient evaluations to spend.
    pub iterations: usize,
    /// Relaxation factor for the preconditioned gradient step; halved
    /// whenever a trial increases the loss and regrown (up to this value)
    /// after every accepted trial.
    pub learning_rate: f64,
    /// Heavy-ball coefficient: fraction of the previous accepted update
    /// carried into the next trial. Zeroed whenever a trial is rejected, so
    /// accepted losses stay strictly decreasing.
    pub momentum: f64,
    /// Step floor: once halving pushes the factor below this, iteration
    /// stops.
    pub min_step: f64,
    /// Objective coefficients (the mask is all-ones here).
    pub loss: LossConfig,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            iterations: 500,
            learning_rate: 0.5,
            momentum: 0.9,
            min_step: 1e-6,
            loss: LossConfig::default(),
        }
    }
}

/// Result of [`estimate_variational`]: the best flow found and the loss at
/// every accepted iterate (index 0 is the zero-flow starting point).
#[derive(Clone, Debug)]
pub struct VariationalOutcome {
    pub flow: VectorField,
    pub accepted: Vec<LossBreakdown>,
}

/// Minimizes `total_loss(next, advect(prev, w), all-ones, w)` over `w` by
/// preconditioned heavy-ball gradient descent from zero flow. The descent
/// direction is the gradient from [`grad_total_loss`] divided by a diagonal
/// Gauss-Newton curvature estimate (squared source-image gradients for the
/// data term plus the constant diagonal of the regularizer operators), which
/// equalizes progress between strongly textured pixels and pixels that only
/// feel the motion through the smoothness coupling; momentum accelerates the
/// weakly pinned smooth modes. Per-pixel increments are clamped to one pixel
/// per trial, trials that increase the loss are rejected (halving the
/// relaxation factor and dropping the momentum), and the best iterate is
/// returned. The accepted-loss sequence is strictly decreasing by
/// construction.
pub fn estimate_variational(
    prev: &ScalarField,
    next: &ScalarField,
    cfg: &VariationalConfig,
    kernel: &KernelConfig,
) -> Result<VariationalOutcome> {
    prev.expect_same_shape(next)?;
    if cfg.iterations == 0 {
        return Err(Error::config("variational estimator needs at least one iteration"));
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.min_step > 0.0) {
        return Err(Error::config(
            "variational learning rate and step floor must be positive",
        ));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config(format!(
            "variational momentum must lie in [0, 1), got {}",
            cfg.momentum
        )));
    }
    let (h, w) = prev.shape();
    let n = (h * w) as f64;
    let mask = ConflictMask::all_ones(h, w);
    let eval = |flow: &VectorField| -> Result<(LossBreakdown, VectorField)> {
        let (breakdown, grad) = grad_total_loss(next, prev, flow, &mask, &cfg.loss, kernel)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                context: "variational objective".into(),
            });
        }
        Ok((breakdown, grad))
    };

    // Diagonal curvature: (2/n) * (alpha * dI^2 + lambda_div / 2 +
    // lambda_smooth), per component, floored away from zero. The central
    // difference stencils contribute 1/2 per axis to their operators'
    // diagonals.
    let source_grad = gradient(prev);
    let reg_diag = 0.5 * cfg.loss.lambda_div + cfg.loss.lambda_smooth;
    let curvature = |d: f64| (2.0 / n) * (cfg.loss.alpha * d * d + reg_diag) + 1e-12;

    let mut flow = VectorField::zeros(h, w);
    let (mut best, mut grad) = eval(&flow)?;
    let mut accepted = vec![best];
    let mut step = cfg.learning_rate;
    let mut velocity = VectorField::zeros(h, w);

    for _ in 1..cfg.iterations {
        if grad.max_abs() == 0.0 {
            break;
        }
        let next_velocity = VectorField::from_fn(h, w, |y, x| {
            let du = cfg.momentum * velocity.u(y, x)
                + step * grad.u(y, x) / curvature(source_grad.u(y, x));
            let dv = cfg.momentum * velocity.v(y, x)
                + step * grad.v(y, x) / curvature(source_grad.v(y, x));
            (du.clamp(-1.0, 1.0), dv.clamp(-1.0, 1.0))
        });
        let trial = VectorField::from_fn(h, w, |y, x| {
            (
                flow.u(y, x) - next_velocity.u(y, x),
                flow.v(y, x) - next_velocity.v(y, x),
            )
        });
        let (trial_loss, trial_grad) = eval(&trial)?;
        if trial_loss.total < best.total {
            flow = trial;
            best = trial_loss;
            grad = trial_grad;
            velocity = next_velocity;
            accepted.push(best);
            step = (step * 2.0).min(cfg.learning_rate);
        } else {
            velocity = VectorField::zeros(h, w);
            step *= 0.5;
            if step < cfg.min_step {
                break;
            }
        }
    }
    Ok(VariationalOutcome { flow, accepted })
}

/// [`MotionEstimator`] that minimizes the objective over the window's most
/// recent observed interval and carries that flow forward.
#[derive(Clone, Copy, Debug, Default)]
pub struct VariationalEstimator {
    pub cfg: VariationalConfig,
    pub kernel: KernelConfig,
}

impl MotionEstimator for VariationalEstimator {
    fn estimate(&self, window: &[ScalarField]) -> Result<VectorField> {
        if window.len() < 2 {
            return Err(Error::data(format!(
                "variational estimation needs at least two frames, got {}",
                window.len()
            )));
        }
        let prev = &window[window.len() - 2];
        let next = &window[window.len() - 1];
        Ok(estimate_variational(prev, next, &self.cfg, &self.kernel)?.flow)
    }
}

/// [`MotionEstimator`] backed by the learned motion head.
#[derive(Clone, Debug)]
pub struct NetEstimator {
    pub net: MotionNet,
}

impl MotionEstimator for NetEstimator {
    fn estimate(&self, window: &[ScalarField]) -> Result<VectorField> {
        self.net.estimate_flow(window)
    }
}
