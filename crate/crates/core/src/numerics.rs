//! Small root finders shared by the device and equilibrium code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-12,
            max_iter: 100,
            fd_step: 1e-7,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: &mut F, x: &[f64], m: usize, step: f64) -> DMatrix<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    for j in 0..n {
        let h = step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        f(&xp, &mut fp);
        xp[j] = x[j] - h;
        f(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Damped Newton iteration for a square system `f(x) = 0`.
///
/// Returns the root and the number of iterations used.
pub fn newton<F>(
    mut f: F,
    x0: &[f64],
    opts: NewtonOptions,
    context: &str,
) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = vec![0.0; n];
    f(&x, &mut fx);
    let mut norm = inf_norm(&fx);
    if n == 0 {
        return Ok((x, 0));
    }
    let mut trial = vec![0.0; n];
    let mut ftrial = vec![0.0; n];
    for iter in 0..opts.max_iter {
        if !norm.is_finite() {
            break;
        }
        if norm <= opts.tol {
            return Ok((x, iter));
        }
        let jac = fd_jacobian(&mut f, &x, n, opts.fd_step);
        let rhs = DVector::from_iterator(n, fx.iter().map(|v| -v));
        let step = match jac.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                // singular Jacobian: fall back to least squares
                let svd = jac.svd(true, true);
                match svd.solve(&rhs, 1e-12) {
                    Ok(s) => s,
                    Err(_) => break,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..n {
                trial[i] = x[i] + t * step[i];
            }
            f(&trial, &mut ftrial);
            let tn = inf_norm(&ftrial);
            if tn.is_finite() && (tn < norm * (1.0 - 1e-4 * t) || tn <= opts.tol) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // take the full step anyway when stagnating near the tolerance
            if norm < 1e3 * opts.tol {
                return Ok((x, iter));
            }
            break;
        }
        x.copy_from_slice(&trial);
        fx.copy_from_slice(&ftrial);
        norm = inf_norm(&fx);
    }
    if norm <= opts.tol {
        return Ok((x, opts.max_iter));
    }
    Err(Error::NewtonFailed {
        context: context.to_string(),
        residual: norm,
        iterations: opts.max_iter,
    })
}

/// Root of a strictly decreasing scalar function given its derivative,
/// using Newton steps safeguarded by a bracket.
pub fn decreasing_root<F>(mut g: F, x0: f64, tol: f64, context: &str) -> Result<f64>
where
    F: FnMut(f64) -> (f64, f64),
{
    let mut x = x0;
    let (mut r, mut dr) = g(x);
    if r == 0.0 {
        return Ok(x);
    }
    // bracket [lo, hi] with r(lo) > 0 > r(hi)
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for _ in 0..200 {
        if !r.is_finite() {
            break;
        }
        if r.abs() <= tol {
            return Ok(x);
        }
        if r > 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let mut next = if dr < 0.0 { x - r / dr } else { f64::NAN };
        let inside = next.is_finite() && next > lo && next < hi;
        if !inside {
            next = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 2.0 * (1.0 + (x - lo).abs()),
                (false, true) => hi - 2.0 * (1.0 + (hi - x).abs()),
                _ => x - r.signum(),
            };
        }
        if next == x {
            return Ok(x);
        }
        x = next;
        (r, dr) = g(x);
        if lo.is_finite() && hi.is_finite() && hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
            return Ok(x);
        }
    }
    Err(Error::NewtonFailed {
        context: context.to_string(),
        residual: r.abs(),
        iterations: 200,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_solves_small_system() {
        let f = |x: &[f64], out: &mut [f64]| {
            out[0] = x[0] * x[0] + x[1] - 3.0;
            out[1] = x[0] - x[1] + 1.0;
        };
        let (x, _) = newton(f, &[0.5, 0.5], NewtonOptions::default(), "test").unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!((x[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn newton_reports_failure() {
        let f = |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0] + 1.0;
        let err = newton(f, &[1.0], NewtonOptions::default(), "no root").unwrap_err();
        assert!(matches!(err, Error::NewtonFailed { .. }));
    }

    #[test]
    fn scalar_root_matches_bisection() {
        let g = |w: f64| (1.0 - 2.0 * w - 0.1 * w.powi(3), -2.0 - 0.3 * w * w);
        let root = decreasing_root(g, 0.0, 1e-14, "cubic").unwrap();
        let (mut lo, mut hi) = (-10.0_f64, 10.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid).0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((root - 0.5 * (lo + hi)).abs() < 1e-9);
    }

    #[test]
    fn scalar_root_with_flat_pieces() {
        // clipped response: derivative zero away from the root
        let g = |w: f64| {
            let s = (1.0 - w).clamp(-0.2, 0.2);
            (s - 0.5 * w, if (1.0 - w).abs() < 0.2 { -1.5 } else { -0.5 })
        };
        let root = decreasing_root(g, 10.0, 1e-13, "clip").unwrap();
        assert!(g(root).0.abs() < 1e-12);
    }
}
