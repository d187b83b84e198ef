//! Conflict masks from forward-splatted energy.
//!
//! Every pixel of a unit ("all ones") field pushes its energy forward along
//! the flow to `(x + u, y + v)`. Where the arriving energy is (near) zero the
//! flow left a gap; where it piles up to two or more, several sources collide.
//! Both conditions mark a pixel whose warped prediction cannot be trusted, so
//! the mask is zero there and one elsewhere. Energy leaving the grid is
//! discarded but accounted for, so total energy is conserved.

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};

/// How a source pixel's energy lands on the target grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplatMode {
    /// Distribute over the four surrounding pixels with bilinear weights.
    #[default]
    Bilinear,
    /// Deposit everything on the nearest pixel (ties round half away from
    /// zero, following `f64::round`).
    Nearest,
}

/// Forward-splatted unit energy plus the amount that left the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyField {
    grid: ScalarField,
    discarded: f64,
}

impl EnergyField {
    pub fn grid(&self) -> &ScalarField {
        &self.grid
    }

    /// Energy that landed outside the grid and was dropped.
    pub fn discarded(&self) -> f64 {
        self.discarded
    }

    /// In-grid energy plus discarded energy; equals the pixel count.
    pub fn total(&self) -> f64 {
        self.grid.sum() + self.discarded
    }
}

/// Thresholds classifying a pixel's arriving energy: trusted only when
/// `tau_low < E < tau_high`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskThresholds {
    pub tau_low: f64,
    pub tau_high: f64,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds {
            tau_low: 0.05,
            tau_high: 1.75,
        }
    }
}

impl MaskThresholds {
    /// The literal gap/collision thresholds (exactly zero energy, or two or
    /// more arrivals); exact for integer flows under nearest splatting.
    pub fn literal() -> Self {
        MaskThresholds {
            tau_low: 0.0,
            tau_high: 2.0,
        }
    }
}

/// A 0/1 trust mask: one where the warped prediction is reliable.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictMask {
    grid: ScalarField,
}

impl ConflictMask {
    /// Fully trusted mask (all ones).
    pub fn all_ones(height: usize, width: usize) -> Self {
        ConflictMask {
            grid: ScalarField::filled(height, width, 1.0),
        }
    }

    /// Wraps a field whose pixels are already exactly zero or one.
    pub fn from_field(grid: ScalarField) -> Result<Self> {
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("mask pixels must be exactly 0 or 1"));
        }
        Ok(ConflictMask { grid })
    }

    pub fn grid(&self) -> &ScalarField {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    /// 1.0 where trusted, 0.0 where not.
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.grid.get(y, x)
    }

    pub fn is_trusted(&self, y: usize, x: usize) -> bool {
        self.grid.get(y, x) == 1.0
    }

    /// Fraction of pixels with mask one.
    pub fn fraction_trusted(&self) -> f64 {
        self.grid.sum() / (self.grid.height() * self.grid.width()) as f64
    }
}

/// Forward-splats one unit of energy per source pixel along `flow`.
pub fn splat_energy(flow: &VectorField, mode: SplatMode) -> EnergyField {
    let (h, w) = flow.shape();
    let mut grid = ScalarField::zeros(h, w);
    let mut discarded = 0.0;
    for y in 0..h {
        for x in 0..w {
            let tx = x as f64 + flow.u(y, x);
            let ty = y as f64 + flow.v(y, x);
            match mode {
                SplatMode::Nearest => {
                    let rx = tx.round();
                    let ry = ty.round();
                    if rx >= 0.0 && rx < w as f64 && ry >= 0.0 && ry < h as f64 {
                        let i = ry as usize * w + rx as usize;
                        grid.data_mut()[i] += 1.0;
                    } else {
                        discarded += 1.0;
                    }
                }
                SplatMode::Bilinear => {
                    // A target outside (-1, w) x (-1, h) puts zero weight on
                    // every in-range corner, and a non-finite target has no
                    // corners at all; both must bail out before the integer
                    // casts below, which would saturate and overflow.
                    if !(tx > -1.0 && tx < w as f64 && ty > -1.0 && ty < h as f64) {
                        discarded += 1.0;
                        continue;
                    }
                    let x0 = tx.floor();
                    let y0 = ty.floor();
                    let fx = tx - x0;
                    let fy = ty - y0;
                    let x0 = x0 as i64;
                    let y0 = y0 as i64;
                    let corners = [
                        (y0, x0, (1.0 - fx) * (1.0 - fy)),
                        (y0, x0 + 1, fx * (1.0 - fy)),
                        (y0 + 1, x0, (1.0 - fx) * fy),
                        (y0 + 1, x0 + 1, fx * fy),
                    ];
                    for (cy, cx, wt) in corners {
                        if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
                            grid.data_mut()[cy as usize * w as usize + cx as usize] += wt;
                        } else {
                            discarded += wt;
                        }
                    }
                }
            }
        }
    }
    EnergyField { grid, discarded }
}

/// Thresholds an energy field into a conflict mask: zero where
/// `E <= tau_low` (gap) or `E >= tau_high` (collision), one elsewhere.
pub fn conflict_mask(energy: &EnergyField, thresholds: &MaskThresholds) -> Result<ConflictMask> {
    if !(thresholds.tau_low < thresholds.tau_high) {
        return Err(Error::config(format!(
            "tau_low {} must be below tau_high {}",
            thresholds.tau_low, thresholds.tau_high
        )));
    }
    let (h, w) = energy.grid.shape();
    let grid = ScalarField::from_fn(h, w, |y, x| {
        let e = energy.grid.get(y, x);
        if e <= thresholds.tau_low || e >= thresholds.tau_high {
            0.0
        } else {
            1.0
        }
    });
    Ok(ConflictMask { grid })
}
