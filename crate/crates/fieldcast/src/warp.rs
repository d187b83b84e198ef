//! Backward warping of scalar fields under an advection-diffusion kernel.
//!
//! The continuous model moves a field along a divergence-free displacement
//! field while diffusing it; over one frame interval the solution is a
//! Gaussian-weighted average around the displaced source point. Discretely,
//! the output at pixel `x` is a stencil-weighted sum of bilinear samples of
//! the source centered at `x - w(x)`:
//!
//! ```text
//! out(x) = sum_s k[s] * bilinear(src, x - w(x) + offset[s])
//! ```
//!
//! where `k` is a truncated, renormalized Gaussian with per-axis variance
//! `2 * kappa` (`kappa` being the diffusivity-times-interval product). With
//! `kappa = 0` the stencil degenerates to a single tap and `advect` becomes a
//! plain backward warp. Samples outside the grid read a constant padding
//! value.

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};

/// Constant-value padding for samples outside the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaddingRule {
    pub value: f64,
}

impl Default for PaddingRule {
    fn default() -> Self {
        PaddingRule { value: 0.0 }
    }
}

/// Diffusion kernel parameters for one frame interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    /// Diffusivity times interval length; the kernel's per-axis variance is
    /// `2 * kappa`. Zero disables diffusion.
    pub kappa: f64,
    /// Stencil half-width; `None` selects `ceil(4 * sqrt(2 * kappa))`.
    pub truncation_radius: Option<usize>,
    /// Out-of-grid sampling rule.
    pub padding: PaddingRule,
}

impl KernelConfig {
    /// Pure backward warp: no diffusion, zero padding.
    pub fn delta() -> Self {
        KernelConfig {
            kappa: 0.0,
            truncation_radius: None,
            padding: PaddingRule::default(),
        }
    }

    /// Diffusing kernel with the default truncation radius and zero padding.
    pub fn new(kappa: f64) -> Self {
        KernelConfig {
            kappa,
            truncation_radius: None,
            padding: PaddingRule::default(),
        }
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::delta()
    }
}

/// A square stencil of side `2 * radius + 1`, row-major, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelStencil {
    radius: usize,
    weights: Vec<f64>,
}

impl KernelStencil {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at integer offset `(dy, dx)`, both in `-radius..=radius`.
    pub fn weight(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * self.side() as isize + (dx + r)) as usize]
    }

    /// Per-axis variance of the discrete stencil.
    pub fn variance(&self) -> f64 {
        let r = self.radius as isize;
        let mut var = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                var += self.weight(dy, dx) * (dx * dx) as f64;
            }
        }
        var
    }
}

/// Samples the truncated Gaussian stencil for `cfg`: weights proportional to
/// `exp(-(dx^2 + dy^2) / (4 * kappa))`, renormalized to sum to one. A zero
/// `kappa` yields the single-tap identity stencil.
pub fn gaussian_kernel(cfg: &KernelConfig) -> Result<KernelStencil> {
    if !cfg.kappa.is_finite() || cfg.kappa < 0.0 {
        return Err(Error::config(format!(
            "kappa must be finite and non-negative, got {}",
            cfg.kappa
        )));
    }
    if cfg.kappa == 0.0 {
        return Ok(KernelStencil {
            radius: 0,
            weights: vec![1.0],
        });
    }
    let sigma = (2.0 * cfg.kappa).sqrt();
    let radius = cfg
        .truncation_radius
        .unwrap_or_else(|| (4.0 * sigma).ceil() as usize)
        .max(1);
    let side = 2 * radius + 1;
    let mut weights = Vec::with_capacity(side * side);
    let inv = 1.0 / (4.0 * cfg.kappa);
    let r = radius as isize;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) * inv).exp();
            weights.push(w);
            sum += w;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(KernelStencil { radius, weights })
}

/// Bilinear sample of `f` at fractional coordinates `(x, y)`; out-of-grid
/// corners read `pad.value`.
pub fn bilinear_sample(f: &ScalarField, x: f64, y: f64, pad: &PaddingRule) -> f64 {
    bilinear_raw(f.data(), f.height(), f.width(), x, y, pad.value)
}

#[inline]
fn corner(src: &[f64], h: usize, w: usize, y: isize, x: isize, pad: f64) -> f64 {
    if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
        src[y as usize * w + x as usize]
    } else {
        pad
    }
}

pub(crate) fn bilinear_raw(src: &[f64], h: usize, w: usize, x: f64, y: f64, pad: f64) -> f64 {
    // Outside (-1, w) x (-1, h) every corner reads padding, and a non-finite
    // coordinate has no corners; bail out before the casts below saturate.
    if !(x > -1.0 && x < w as f64 && y > -1.0 && y < h as f64) {
        return pad;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    let v00 = corner(src, h, w, y0, x0, pad);
    let v01 = corner(src, h, w, y0, x0 + 1, pad);
    let v10 = corner(src, h, w, y0 + 1, x0, pad);
    let v11 = corner(src, h, w, y0 + 1, x0 + 1, pad);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Forward value and partial derivatives of the bilinear interpolant with
/// respect to the sample coordinates.
#[inline]
pub(crate) fn bilinear_with_derivs(
    src: &[f64],
    h: usize,
    w: usize,
    x: f64,
    y: f64,
    pad: f64,
) -> (f64, f64, f64) {
    if !(x > -1.0 && x < w as f64 && y > -1.0 && y < h as f64) {
        return (pad, 0.0, 0.0);
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    let v00 = corner(src, h, w, y0, x0, pad);
    let v01 = corner(src, h, w, y0, x0 + 1, pad);
    let v10 = corner(src, h, w, y0 + 1, x0, pad);
    let v11 = corner(src, h, w, y0 + 1, x0 + 1, pad);
    let value = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    let d_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let d_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (value, d_dx, d_dy)
}

/// Core advection kernel over raw buffers: for each output pixel, a
/// stencil-weighted sum of bilinear samples centered at `x - w(x)`.
pub(crate) fn advect_raw(
    src: &[f64],
    h: usize,
    w: usize,
    u: &[f64],
    v: &[f64],
    stencil: &KernelStencil,
    pad: f64,
    out: &mut [f64],
) {
    let r = stencil.radius() as isize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let cx = x as f64 - u[i];
            let cy = y as f64 - v[i];
            let mut acc = 0.0;
            let mut wi = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = stencil.weights()[wi];
                    wi += 1;
                    acc += k * bilinear_raw(src, h, w, cx + dx as f64, cy + dy as f64, pad);
                }
            }
            out[i] = acc;
        }
    }
}

/// Backward pass of [`advect_raw`]: accumulates gradients with respect to the
/// source values and/or the flow components, given the output gradient.
pub(crate) fn advect_backward_raw(
    src: &[f64],
    h: usize,
    w: usize,
    u: &[f64],
    v: &[f64],
    stencil: &KernelStencil,
    pad: f64,
    g_out: &[f64],
    mut g_src: Option<&mut [f64]>,
    mut g_u: Option<&mut [f64]>,
    mut g_v: Option<&mut [f64]>,
) {
    let r = stencil.radius() as isize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = g_out[i];
            if g == 0.0 {
                continue;
            }
            let cx = x as f64 - u[i];
            let cy = y as f64 - v[i];
            let mut wi = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = stencil.weights()[wi];
                    wi += 1;
                    let px = cx + dx as f64;
                    let py = cy + dy as f64;
                    let in_range =
                        px > -1.0 && px < w as f64 && py > -1.0 && py < h as f64;
                    if let (Some(gs), true) = (g_src.as_deref_mut(), in_range) {
                        let x0 = px.floor();
                        let y0 = py.floor();
                        let fx = px - x0;
                        let fy = py - y0;
                        let x0 = x0 as isize;
                        let y0 = y0 as isize;
                        let mut put = |yy: isize, xx: isize, wt: f64| {
                            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                                gs[yy as usize * w + xx as usize] += g * k * wt;
                            }
                        };
                        put(y0, x0, (1.0 - fx) * (1.0 - fy));
                        put(y0, x0 + 1, fx * (1.0 - fy));
                        put(y0 + 1, x0, (1.0 - fx) * fy);
                        put(y0 + 1, x0 + 1, fx * fy);
                    }
                    if g_u.is_some() || g_v.is_some() {
                        let (_, d_dx, d_dy) = bilinear_with_derivs(src, h, w, px, py, pad);
                        // The sample point is x - u, so d/du = -d/dx.
                        if let Some(gu) = g_u.as_deref_mut() {
                            gu[i] -= g * k * d_dx;
                        }
                        if let Some(gv) = g_v.as_deref_mut() {
                            gv[i] -= g * k * d_dy;
                        }
                    }
                }
            }
        }
    }
}

/// Advances `src` one interval: backward-warps it along `flow` under the
/// diffusion kernel of `cfg`.
pub fn advect(src: &ScalarField, flow: &VectorField, cfg: &KernelConfig) -> Result<ScalarField> {
    flow.expect_shape(src.shape())?;
    let stencil = gaussian_kernel(cfg)?;
    let (h, w) = src.shape();
    let mut out = vec![0.0; h * w];
    advect_raw(
        src.data(),
        h,
        w,
        flow.u_data(),
        flow.v_data(),
        &stencil,
        cfg.padding.value,
        &mut out,
    );
    ScalarField::from_vec(h, w, out)
}

/// Backward-warps each component of `flow` along `by` (plain bilinear
/// resampling, zero padding): the flow-composition helper.
pub fn warp_flow(flow: &VectorField, by: &VectorField) -> Result<VectorField> {
    by.expect_shape(flow.shape())?;
    let (h, w) = flow.shape();
    let delta = gaussian_kernel(&KernelConfig::delta())?;
    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    advect_raw(
        flow.u_data(),
        h,
        w,
        by.u_data(),
        by.v_data(),
        &delta,
        0.0,
        &mut u,
    );
    advect_raw(
        flow.v_data(),
        h,
        w,
        by.u_data(),
        by.v_data(),
        &delta,
        0.0,
        &mut v,
    );
    VectorField::from_components(h, w, u, v)
}
