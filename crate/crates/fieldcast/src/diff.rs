//! Spatial finite-difference stencils: per-pixel gradient and divergence.
//!
//! Interior pixels use central differences; boundary pixels fall back to
//! one-sided differences so every pixel has a defined derivative. Grids with
//! a single row or column have zero derivative along the degenerate axis (no
//! neighbors to difference).

use crate::field::{ScalarField, VectorField};

/// d/dx (along columns) of a row-major `height x width` buffer.
pub(crate) fn ddx(src: &[f64], height: usize, width: usize, out: &mut [f64]) {
    for y in 0..height {
        let row = y * width;
        if width == 1 {
            out[row] = 0.0;
            continue;
        }
        out[row] = src[row + 1] - src[row];
        for x in 1..width - 1 {
            out[row + x] = 0.5 * (src[row + x + 1] - src[row + x - 1]);
        }
        out[row + width - 1] = src[row + width - 1] - src[row + width - 2];
    }
}

/// d/dy (along rows) of a row-major `height x width` buffer.
pub(crate) fn ddy(src: &[f64], height: usize, width: usize, out: &mut [f64]) {
    if height == 1 {
        out[..width].fill(0.0);
        return;
    }
    for x in 0..width {
        out[x] = src[width + x] - src[x];
        let bottom = (height - 1) * width;
        out[bottom + x] = src[bottom + x] - src[bottom - width + x];
    }
    for y in 1..height - 1 {
        let row = y * width;
        for x in 0..width {
            out[row + x] = 0.5 * (src[row + width + x] - src[row - width + x]);
        }
    }
}

/// Adjoint of [`ddx`]: accumulates `d(ddx)/d(src)` applied to `g` into `acc`.
pub(crate) fn ddx_adjoint(g: &[f64], height: usize, width: usize, acc: &mut [f64]) {
    for y in 0..height {
        let row = y * width;
        if width == 1 {
            continue;
        }
        acc[row] -= g[row];
        acc[row + 1] += g[row];
        for x in 1..width - 1 {
            acc[row + x + 1] += 0.5 * g[row + x];
            acc[row + x - 1] -= 0.5 * g[row + x];
        }
        let last = row + width - 1;
        acc[last] += g[last];
        acc[last - 1] -= g[last];
    }
}

/// Adjoint of [`ddy`].
pub(crate) fn ddy_adjoint(g: &[f64], height: usize, width: usize, acc: &mut [f64]) {
    if height == 1 {
        return;
    }
    for x in 0..width {
        acc[x] -= g[x];
        acc[width + x] += g[x];
        let bottom = (height - 1) * width;
        acc[bottom + x] += g[bottom + x];
        acc[bottom - width + x] -= g[bottom + x];
    }
    for y in 1..height - 1 {
        let row = y * width;
        for x in 0..width {
            acc[row + width + x] += 0.5 * g[row + x];
            acc[row - width + x] -= 0.5 * g[row + x];
        }
    }
}

/// Per-pixel spatial gradient of a scalar field: `u = df/dx`, `v = df/dy`.
pub fn gradient(f: &ScalarField) -> VectorField {
    let (h, w) = f.shape();
    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    ddx(f.data(), h, w, &mut u);
    ddy(f.data(), h, w, &mut v);
    VectorField::from_components(h, w, u, v).expect("gradient buffers match field shape")
}

/// Per-pixel divergence of a displacement field: `du/dx + dv/dy`.
pub fn divergence(w: &VectorField) -> ScalarField {
    let (h, wd) = w.shape();
    let mut dx = vec![0.0; h * wd];
    let mut dy = vec![0.0; h * wd];
    ddx(w.u_data(), h, wd, &mut dx);
    ddy(w.v_data(), h, wd, &mut dy);
    for (a, b) in dx.iter_mut().zip(dy.iter()) {
        *a += b;
    }
    ScalarField::from_vec(h, wd, dx).expect("divergence buffer matches field shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reference of the same stencil, written index-by-index.
    fn gradient_oracle(f: &ScalarField) -> VectorField {
        let (h, w) = f.shape();
        VectorField::from_fn(h, w, |y, x| {
            let du = if w == 1 {
                0.0
            } else if x == 0 {
                f.get(y, 1) - f.get(y, 0)
            } else if x == w - 1 {
                f.get(y, w - 1) - f.get(y, w - 2)
            } else {
                0.5 * (f.get(y, x + 1) - f.get(y, x - 1))
            };
            let dv = if h == 1 {
                0.0
            } else if y == 0 {
                f.get(1, x) - f.get(0, x)
            } else if y == h - 1 {
                f.get(h - 1, x) - f.get(h - 2, x)
            } else {
                0.5 * (f.get(y + 1, x) - f.get(y - 1, x))
            };
            (du, dv)
        })
    }

    #[test]
    fn gradient_of_linear_ramp_is_exact_everywhere() {
        let f = ScalarField::from_fn(5, 7, |y, x| 2.0 * x as f64 - 3.0 * y as f64);
        let g = gradient(&f);
        for y in 0..5 {
            for x in 0..7 {
                assert!(
                    (g.u(y, x) - 2.0).abs() < 1e-12,
                    "du/dx of 2x must be 2 at ({y},{x}), got {}",
                    g.u(y, x)
                );
                assert!(
                    (g.v(y, x) + 3.0).abs() < 1e-12,
                    "dv/dy of -3y must be -3 at ({y},{x}), got {}",
                    g.v(y, x)
                );
            }
        }
    }

    #[test]
    fn gradient_of_constant_field_is_zero() {
        let f = ScalarField::filled(4, 4, 7.25);
        let g = gradient(&f);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn gradient_matches_brute_force_oracle_on_random_field() {
        let f = ScalarField::from_fn(6, 5, |y, x| {
            ((y * 31 + x * 17 + 3) % 13) as f64 * 0.37 - 1.0
        });
        let got = gradient(&f);
        let want = gradient_oracle(&f);
        for i in 0..30 {
            assert_eq!(got.u_data()[i], want.u_data()[i], "du mismatch at {i}");
            assert_eq!(got.v_data()[i], want.v_data()[i], "dv mismatch at {i}");
        }
    }

    #[test]
    fn single_pixel_field_has_zero_gradient() {
        let f = ScalarField::filled(1, 1, 4.0);
        let g = gradient(&f);
        assert_eq!(g.u(0, 0), 0.0);
        assert_eq!(g.v(0, 0), 0.0);
    }

    #[test]
    fn divergence_of_identity_flow_is_two_everywhere() {
        // w = (x, y): du/dx = 1 and dv/dy = 1 exactly, including the
        // one-sided boundary stencils, because the field is linear.
        let w = VectorField::from_fn(6, 6, |y, x| (x as f64, y as f64));
        let d = divergence(&w);
        for v in d.data() {
            assert!((v - 2.0).abs() < 1e-12, "divergence of (x, y) is 2, got {v}");
        }
    }

    #[test]
    fn divergence_of_rigid_rotation_is_zero() {
        let w = VectorField::from_fn(8, 8, |y, x| (-(y as f64 - 3.5), x as f64 - 3.5));
        let d = divergence(&w);
        assert!(
            d.max_abs() < 1e-12,
            "rotation field must be divergence-free, max {}",
            d.max_abs()
        );
    }

    #[test]
    fn divergence_composed_with_gradient_matches_manual_stencil() {
        // divergence(gradient(f)) computed through the public API must agree
        // exactly with composing the raw stencils by hand.
        let f = ScalarField::from_fn(7, 6, |y, x| ((x * x + 3 * y) % 11) as f64 * 0.21);
        let via_api = divergence(&gradient(&f));
        let (h, w) = f.shape();
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        ddx(f.data(), h, w, &mut gx);
        ddy(f.data(), h, w, &mut gy);
        let mut lap = vec![0.0; h * w];
        let mut tmp = vec![0.0; h * w];
        ddx(&gx, h, w, &mut lap);
        ddy(&gy, h, w, &mut tmp);
        for i in 0..h * w {
            lap[i] += tmp[i];
            assert_eq!(via_api.data()[i], lap[i], "stencil composition differs at {i}");
        }
    }

    #[test]
    fn adjoints_satisfy_the_inner_product_identity() {
        // <ddx(a), b> == <a, ddx_adjoint(b)> for arbitrary buffers.
        let h = 5;
        let w = 6;
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 7 + 1) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..h * w).map(|i| ((i * 5 + 2) % 11) as f64 - 5.0).collect();
        let mut da = vec![0.0; h * w];
        ddx(&a, h, w, &mut da);
        let lhs: f64 = da.iter().zip(&b).map(|(x, y)| x * y).sum();
        let mut adj = vec![0.0; h * w];
        ddx_adjoint(&b, h, w, &mut adj);
        let rhs: f64 = a.iter().zip(&adj).map(|(x, y)| x * y).sum();
        assert!(
            (lhs - rhs).abs() < 1e-10,
            "ddx adjoint identity violated: {lhs} vs {rhs}"
        );

        let mut da = vec![0.0; h * w];
        ddy(&a, h, w, &mut da);
        let lhs: f64 = da.iter().zip(&b).map(|(x, y)| x * y).sum();
        let mut adj = vec![0.0; h * w];
        ddy_adjoint(&b, h, w, &mut adj);
        let rhs: f64 = a.iter().zip(&adj).map(|(x, y)| x * y).sum();
        assert!(
            (lhs - rhs).abs() < 1e-10,
            "ddy adjoint identity violated: {lhs} vs {rhs}"
        );
    }
}
