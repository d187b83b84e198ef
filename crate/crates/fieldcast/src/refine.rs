//! Stage-two refiners: given a propagated frame and its confidence mask,
//! produce the refined frame. The deterministic variant fills untrusted
//! pixels by diffusion inpainting; the learned variant delegates to the
//! generator head.

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::mask::ConflictMask;
use crate::net::GeneratorNet;

/// Fills in the untrusted pixels of a propagated frame.
pub trait Refiner {
    fn refine(&self, propagated: &ScalarField, mask: &ConflictMask) -> Result<ScalarField>;
}

/// Stop once no untrusted pixel moves by more than this in one sweep.
pub const INPAINT_RESIDUAL: f64 = 1e-6;
/// Hard cap on Jacobi sweeps.
pub const INPAINT_MAX_SWEEPS: usize = 10_000;

/// Diffusion inpainting: trusted pixels are copied unchanged; untrusted
/// pixels start from the mean of the trusted values and relax under Jacobi
/// iteration of the discrete Laplace equation (4-neighbor average with
/// replicated edges) until the update residual drops below
/// [`INPAINT_RESIDUAL`] or [`INPAINT_MAX_SWEEPS`] sweeps have run.
///
/// Every filled value is an average of current values, and the holes start
/// at the trusted mean, so the output obeys the discrete maximum principle:
/// filled pixels stay within `[min, max]` of the trusted values.
pub fn refine_inpaint(propagated: &ScalarField, mask: &ConflictMask) -> Result<ScalarField> {
    let (h, w) = propagated.shape();
    if mask.shape() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: (h, w),
            got: mask.shape(),
        });
    }
    let holes: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| !mask.is_trusted(y, x))
        .collect();
    if holes.is_empty() {
        return Ok(propagated.clone());
    }
    let trusted: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.is_trusted(y, x))
        .map(|(y, x)| propagated.get(y, x))
        .collect();
    if trusted.is_empty() {
        return Err(Error::data(
            "mask marks no pixel trustworthy; nothing anchors the inpainting",
        ));
    }
    let anchor_mean = trusted.iter().sum::<f64>() / trusted.len() as f64;

    let mut cur = propagated.clone();
    for &(y, x) in &holes {
        cur.set(y, x, anchor_mean);
    }
    let mut next = cur.clone();
    for _ in 0..INPAINT_MAX_SWEEPS {
        let mut residual: f64 = 0.0;
        for &(y, x) in &holes {
            let up = cur.get(y.saturating_sub(1), x);
            let down = cur.get((y + 1).min(h - 1), x);
            let left = cur.get(y, x.saturating_sub(1));
            let right = cur.get(y, (x + 1).min(w - 1));
            let avg = 0.25 * (up + down + left + right);
            residual = residual.max((avg - cur.get(y, x)).abs());
            next.set(y, x, avg);
        }
        std::mem::swap(&mut cur, &mut next);
        if residual < INPAINT_RESIDUAL {
            break;
        }
    }
    Ok(cur)
}

/// [`Refiner`] wrapping [`refine_inpaint`].
#[derive(Clone, Copy, Debug, Default)]
pub struct InpaintRefiner;

impl Refiner for InpaintRefiner {
    fn refine(&self, propagated: &ScalarField, mask: &ConflictMask) -> Result<ScalarField> {
        refine_inpaint(propagated, mask)
    }
}

/// [`Refiner`] backed by the learned generator head. Unlike the inpainting
/// refiner it may adjust trusted pixels; the objective's mask weighting is
/// what holds it close to them.
#[derive(Clone, Debug)]
pub struct NetRefiner {
    pub net: GeneratorNet,
}

impl Refiner for NetRefiner {
    fn refine(&self, propagated: &ScalarField, mask: &ConflictMask) -> Result<ScalarField> {
        self.net.refine_frame(propagated, mask)
    }
}
