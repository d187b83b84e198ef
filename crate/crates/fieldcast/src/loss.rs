//! The training objective: a mask-weighted data term plus divergence and
//! smoothness penalties on the motion field.
//!
//! ```text
//! data(T, P, M)  = mean[ alpha * M * (T - P)^2 + (1 - alpha) * (1 - M) * (T - P)^2 ]
//! total          = lambda_lp * data + lambda_div * mean[(div w)^2]
//!                  + lambda_smooth * mean[|grad u|^2 + |grad v|^2]
//! ```
//!
//! The mask is a fixed input: gradients flow through predictions and flow
//! fields, never through the mask itself.

use std::rc::Rc;

use crate::diff::{divergence, gradient};
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::mask::ConflictMask;
use crate::tape::{Tape, Tensor};
use crate::warp::{gaussian_kernel, KernelConfig};

/// Loss coefficients. Defaults: data weight 1, divergence weight 1,
/// smoothness weight 0.4, trusted-pixel emphasis 0.9.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the mask-split data term.
    pub lambda_lp: f64,
    /// Weight of the squared-divergence penalty.
    pub lambda_div: f64,
    /// Weight of the squared-gradient smoothness penalty.
    pub lambda_smooth: f64,
    /// Share of the data term carried by trusted (mask = 1) pixels.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_lp: 1.0,
            lambda_div: 1.0,
            lambda_smooth: 0.4,
            alpha: 0.9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("lambda_lp", self.lambda_lp),
            ("lambda_div", self.lambda_div),
            ("lambda_smooth", self.lambda_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The three objective terms (unweighted) and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mask_term: f64,
    pub div_term: f64,
    pub smooth_term: f64,
    pub total: f64,
}

/// Per-pixel data weights `alpha * M + (1 - alpha) * (1 - M)`.
pub(crate) fn mask_weights(mask: &ConflictMask, alpha: f64) -> Vec<f64> {
    mask.grid()
        .data()
        .iter()
        .map(|&m| alpha * m + (1.0 - alpha) * (1.0 - m))
        .collect()
}

/// Mask-split squared error, averaged over all pixels: trusted pixels carry
/// weight `alpha`, untrusted pixels `1 - alpha`.
pub fn masked_mse(
    target: &ScalarField,
    pred: &ScalarField,
    mask: &ConflictMask,
    alpha: f64,
) -> Result<f64> {
    target.expect_same_shape(pred)?;
    if mask.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape(),
            got: mask.shape(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let weights = mask_weights(mask, alpha);
    let n = (target.height() * target.width()) as f64;
    let sum: f64 = target
        .data()
        .iter()
        .zip(pred.data())
        .zip(&weights)
        .map(|((t, p), w)| {
            let d = p - t;
            w * d * d
        })
        .sum();
    Ok(sum / n)
}

/// Spatial mean of the squared divergence of `w`.
pub fn divergence_penalty(w: &VectorField) -> f64 {
    let div = divergence(w);
    let n = (w.height() * w.width()) as f64;
    div.data().iter().map(|d| d * d).sum::<f64>() / n
}

/// Spatial mean of the squared gradient magnitude, summed over both flow
/// components.
pub fn smoothness_penalty(w: &VectorField) -> f64 {
    let gu = gradient(&component_field(w, 0));
    let gv = gradient(&component_field(w, 1));
    let n = (w.height() * w.width()) as f64;
    let sum: f64 = gu
        .u_data()
        .iter()
        .chain(gu.v_data())
        .chain(gv.u_data())
        .chain(gv.v_data())
        .map(|g| g * g)
        .sum();
    sum / n
}

fn component_field(w: &VectorField, which: usize) -> ScalarField {
    let data = if which == 0 {
        w.u_data().to_vec()
    } else {
        w.v_data().to_vec()
    };
    ScalarField::from_vec(w.height(), w.width(), data).expect("component buffer matches shape")
}

/// Full objective for one prediction step.
pub fn total_loss(
    target: &ScalarField,
    pred: &ScalarField,
    mask: &ConflictMask,
    flow: &VectorField,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    flow.expect_shape(target.shape())?;
    let mask_term = masked_mse(target, pred, mask, cfg.alpha)?;
    let div_term = divergence_penalty(flow);
    let smooth_term = smoothness_penalty(flow);
    Ok(LossBreakdown {
        mask_term,
        div_term,
        smooth_term,
        total: cfg.lambda_lp * mask_term + cfg.lambda_div * div_term + cfg.lambda_smooth * smooth_term,
    })
}

/// Differentiable objective where the prediction is `advect(source, flow)`:
/// returns the loss and its gradient with respect to every flow component.
/// The source frame and the mask are constants.
pub fn grad_total_loss(
    target: &ScalarField,
    source: &ScalarField,
    flow: &VectorField,
    mask: &ConflictMask,
    cfg: &LossConfig,
    kernel: &KernelConfig,
) -> Result<(LossBreakdown, VectorField)> {
    cfg.validate()?;
    target.expect_same_shape(source)?;
    flow.expect_shape(target.shape())?;
    if mask.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape(),
            got: mask.shape(),
        });
    }
    let stencil = Rc::new(gaussian_kernel(kernel)?);
    let weights = Rc::new(mask_weights(mask, cfg.alpha));

    let mut tape = Tape::new();
    let flow_id = tape.leaf(Tensor::from_flow(flow), true);
    let source_id = tape.constant(Tensor::from_field(source));
    let target_id = tape.constant(Tensor::from_field(target));
    let pred = tape.advect(source_id, flow_id, stencil, kernel.padding.value);
    let err = tape.sub(pred, target_id);
    let mask_term = tape.weighted_mean_sq(err, weights);
    let div = tape.divergence(flow_id);
    let div_term = tape.spatial_mean_sq(div);
    let sg = tape.spatial_grad(flow_id);
    let smooth_term = tape.spatial_mean_sq(sg);
    let total = tape.weighted_sum(&[
        (mask_term, cfg.lambda_lp),
        (div_term, cfg.lambda_div),
        (smooth_term, cfg.lambda_smooth),
    ]);
    let breakdown = LossBreakdown {
        mask_term: tape.scalar(mask_term),
        div_term: tape.scalar(div_term),
        smooth_term: tape.scalar(smooth_term),
        total: tape.scalar(total),
    };
    let grads = tape.backward(total);
    let grad_flow = grads.wrt(flow_id).to_flow();
    Ok((breakdown, grad_flow))
}

/// Denominator floor for relative gradient errors: components where both the
/// analytic and numeric values are below this are compared against it, so
/// roundoff noise in near-zero entries cannot dominate the verdict.
pub const FD_GUARD: f64 = 1e-3;

/// Compares an analytic gradient against central finite differences of `f`
/// at `at`, component by component; returns the worst relative error under
/// the [`FD_GUARD`] denominator floor.
pub fn finite_diff_check_values(
    f: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    at: &[f64],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::config(format!("step must be positive, got {step}")));
    }
    if analytic.len() != at.len() {
        return Err(Error::data(format!(
            "gradient has {} components, point has {}",
            analytic.len(),
            at.len()
        )));
    }
    let mut probe = at.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..at.len() {
        probe[i] = at[i] + step;
        let hi = f(&probe);
        probe[i] = at[i] - step;
        let lo = f(&probe);
        probe[i] = at[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss probe at component {i}"),
            });
        }
        let numeric = (hi - lo) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(FD_GUARD);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// [`finite_diff_check_values`] over a flow field: `f` sees candidate flows,
/// `analytic` is the claimed gradient at `at`.
pub fn finite_diff_check(
    f: impl Fn(&VectorField) -> f64,
    analytic: &VectorField,
    at: &VectorField,
    step: f64,
) -> Result<f64> {
    analytic.expect_shape(at.shape())?;
    let (h, w) = at.shape();
    let mut packed = Vec::with_capacity(2 * h * w);
    packed.extend_from_slice(at.u_data());
    packed.extend_from_slice(at.v_data());
    let mut packed_grad = Vec::with_capacity(2 * h * w);
    packed_grad.extend_from_slice(analytic.u_data());
    packed_grad.extend_from_slice(analytic.v_data());
    let eval = |vals: &[f64]| {
        let (u, v) = vals.split_at(h * w);
        let flow = VectorField::from_components(h, w, u.to_vec(), v.to_vec())
            .expect("packed flow matches shape");
        f(&flow)
    };
    finite_diff_check_values(eval, &packed_grad, &packed, step)
}
