//! Storage-matrix synthesis for the dissipation LMI
//! `[[A^T P + P A, P B], [B^T P, 0]] - Phi <= 0`.
//!
//! Equality constraints forced by the null space of the feedthrough block
//! are eliminated first; the remaining inequality is driven to feasibility
//! by accelerated gradient descent on `||[L_r(P) + delta I]_+||_F^2` with
//! `delta` decreased towards zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::SupplyRateSpec;
use crate::lti::LtiRealization;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageOptions {
    pub max_iter: usize,
    /// Acceptance threshold on the largest LMI eigenvalue (relative to the
    /// problem scale).
    pub lmi_tol: f64,
}

impl Default for StorageOptions {
    fn default() -> Self {
        StorageOptions {
            max_iter: 4000,
            lmi_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageSolution {
    pub p: DMatrix<f64>,
    pub lmi_max_eigenvalue: f64,
    pub min_eigenvalue_p: f64,
    pub delta: f64,
    pub iterations: usize,
}

/// `Phi = [C D; 0 I]^T Q [C D; 0 I]`.
fn phi(real: &LtiRealization, spec: &SupplyRateSpec) -> DMatrix<f64> {
    let n = real.states();
    let mut t = DMatrix::zeros(4, n + 2);
    t.view_mut((0, 0), (2, n)).copy_from(&real.c);
    t.view_mut((0, n), (2, 2)).copy_from(&real.d);
    t[(2, n)] = 1.0;
    t[(3, n + 1)] = 1.0;
    t.transpose() * spec.q_full() * t
}

/// The dissipation LMI matrix `L(P)`.
pub fn lmi_matrix(real: &LtiRealization, spec: &SupplyRateSpec, p: &DMatrix<f64>) -> DMatrix<f64> {
    lmi_with_phi(real, &phi(real, spec), p)
}

fn lmi_with_phi(real: &LtiRealization, phi: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = real.states();
    let mut l = -phi.clone();
    let ap = real.a.transpose() * p + p * &real.a;
    let pb = p * &real.b;
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] += ap[(i, j)];
        }
        for k in 0..2 {
            l[(i, n + k)] += pb[(i, k)];
            l[(n + k, i)] += pb[(i, k)];
        }
    }
    l
}

fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in i..n {
            let mut z = DMatrix::zeros(n, n);
            if i == j {
                z[(i, i)] = 1.0;
            } else {
                z[(i, j)] = r;
                z[(j, i)] = r;
            }
            out.push(z);
        }
    }
    out
}

fn max_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(0.5 * (m + m.transpose()))
        .eigenvalues
        .max()
}

/// Positive part `[X]_+` of a symmetric matrix and `||[X]_+||_F^2`.
fn positive_part(x: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(0.5 * (x + x.transpose()));
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut norm = 0.0;
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += lam * v * v.transpose();
            norm += lam * lam;
        }
    }
    (out, norm)
}

struct Problem<'a> {
    real: &'a LtiRealization,
    phi: DMatrix<f64>,
    basis: Vec<DMatrix<f64>>,
    c0: DVector<f64>,
    null: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl Problem<'_> {
    fn p_of(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let c = &self.c0 + &self.null * y;
        let n = self.real.states();
        let mut p = DMatrix::zeros(n, n);
        for (k, z) in self.basis.iter().enumerate() {
            p += c[k] * z;
        }
        p
    }

    fn restricted(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        self.w.transpose() * lmi_with_phi(self.real, &self.phi, p) * &self.w
    }

    /// Objective and gradient with respect to `y`.
    fn eval(&self, y: &DVector<f64>, delta: f64, want_grad: bool) -> (f64, DVector<f64>) {
        let p = self.p_of(y);
        let mut lr = self.restricted(&p);
        for i in 0..lr.nrows() {
            lr[(i, i)] += delta;
        }
        let (pos, f) = positive_part(&lr);
        if !want_grad {
            return (f, DVector::zeros(0));
        }
        let n = self.real.states();
        let g = &self.w * (2.0 * pos) * self.w.transpose();
        let g11 = g.view((0, 0), (n, n)).into_owned();
        let g12 = g.view((0, n), (n, 2)).into_owned();
        let a = &self.real.a;
        let b = &self.real.b;
        let gp = a * &g11 + &g11 * a.transpose() + &g12 * b.transpose() + b * g12.transpose();
        let gc = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|z| gp.dot(z)));
        (f, self.null.transpose() * gc)
    }
}

/// Finds `P = P^T` with `L(P) <= 0`, or explains why not.
pub fn synthesize_storage(
    real: &LtiRealization,
    spec: &SupplyRateSpec,
    opts: &StorageOptions,
) -> Result<StorageSolution, String> {
    let n = real.states();
    if n == 0 {
        return Ok(StorageSolution {
            p: DMatrix::zeros(0, 0),
            lmi_max_eigenvalue: max_eig(&-phi(real, spec)),
            min_eigenvalue_p: 0.0,
            delta: 0.0,
            iterations: 0,
        });
    }
    if !real.is_hurwitz() {
        return Err("state matrix is not Hurwitz".into());
    }
    let phi = phi(real, spec);
    let scale = 1.0 + phi.amax();
    let r_hat = phi.view((n, n), (2, 2)).into_owned();
    let s_hat = phi.view((0, n), (n, 2)).into_owned();
    let r_eig = SymmetricEigen::new(r_hat.clone());
    let r_tol = 1e-10 * scale;
    if r_eig.eigenvalues.iter().any(|&v| v < -r_tol) {
        return Err(format!(
            "feedthrough form is indefinite (eigenvalue {:.3e})",
            r_eig.eigenvalues.min()
        ));
    }
    let range: Vec<usize> = (0..2).filter(|&k| r_eig.eigenvalues[k] > r_tol).collect();
    let nullk: Vec<usize> = (0..2).filter(|&k| r_eig.eigenvalues[k] <= r_tol).collect();

    let basis = sym_basis(n);
    let q = basis.len();
    // equality constraints (P B - S) N = 0
    let (c0, null) = if nullk.is_empty() {
        (DVector::zeros(q), DMatrix::identity(q, q))
    } else {
        let nmat = DMatrix::from_fn(2, nullk.len(), |i, j| r_eig.eigenvectors[(i, nullk[j])]);
        let rows = n * nullk.len();
        let mut acon = DMatrix::zeros(rows, q);
        for (k, z) in basis.iter().enumerate() {
            let col = z * &real.b * &nmat;
            for (i, v) in col.iter().enumerate() {
                acon[(i, k)] = *v;
            }
        }
        let rhs_m = &s_hat * &nmat;
        let rhs = DVector::from_iterator(rows, rhs_m.iter().copied());
        let svd = acon.clone().svd(true, true);
        let c0 = svd
            .solve(&rhs, 1e-12 * scale)
            .map_err(|e| format!("equality constraints: {e}"))?;
        let resid = (&acon * &c0 - &rhs).amax();
        if resid > 1e-9 * scale {
            return Err(format!(
                "equality constraints inconsistent (residual {resid:.3e})"
            ));
        }
        let gram = SymmetricEigen::new(acon.transpose() * &acon);
        let gmax = gram.eigenvalues.amax().max(1.0);
        let keep: Vec<usize> = (0..q)
            .filter(|&k| gram.eigenvalues[k] <= 1e-20 * gmax)
            .collect();
        let null = DMatrix::from_fn(q, keep.len(), |i, j| gram.eigenvectors[(i, keep[j])]);
        (c0, null)
    };

    let mut w = DMatrix::zeros(n + 2, n + range.len());
    for i in 0..n {
        w[(i, i)] = 1.0;
    }
    for (j, &k) in range.iter().enumerate() {
        for i in 0..2 {
            w[(n + i, n + j)] = r_eig.eigenvectors[(i, k)];
        }
    }
    let prob = Problem {
        real,
        phi,
        basis,
        c0,
        null,
        w,
    };

    let dim = prob.null.ncols();
    let mut y = DVector::zeros(dim);
    let mut iterations = 0;
    let accept = opts.lmi_tol * scale;
    let mut best: Option<StorageSolution> = None;
    let finish = |y: &DVector<f64>, delta: f64, iterations: usize| {
        let p = prob.p_of(y);
        let lmax = max_eig(&lmi_with_phi(real, &prob.phi, &p));
        let pmin = SymmetricEigen::new(p.clone()).eigenvalues.min();
        StorageSolution {
            p,
            lmi_max_eigenvalue: lmax,
            min_eigenvalue_p: pmin,
            delta,
            iterations,
        }
    };

    for &d in &[1e-2, 1e-4, 1e-6, 0.0] {
        let delta = d * scale;
        if dim > 0 {
            iterations += fista(&prob, &mut y, delta, opts.max_iter);
        }
        let sol = finish(&y, delta, iterations);
        if sol.lmi_max_eigenvalue <= accept && sol.min_eigenvalue_p >= -accept {
            return Ok(sol);
        }
        if best
            .as_ref()
            .is_none_or(|b| sol.lmi_max_eigenvalue < b.lmi_max_eigenvalue)
        {
            best = Some(sol);
        }
    }
    let b = best.expect("at least one stage ran");
    Err(format!(
        "no storage found (largest LMI eigenvalue {:.3e} after {} iterations)",
        b.lmi_max_eigenvalue, b.iterations
    ))
}

/// Accelerated projected-free gradient with backtracking and restarts.
/// Returns the iterations used.
fn fista(prob: &Problem<'_>, y: &mut DVector<f64>, delta: f64, max_iter: usize) -> usize {
    let mut x = y.clone();
    let mut z = y.clone();
    let mut t = 1.0_f64;
    let mut lip = 1.0_f64;
    let (mut fx, _) = prob.eval(&x, delta, false);
    for it in 0..max_iter {
        if fx == 0.0 {
            *y = x;
            return it;
        }
        let (fz, gz) = prob.eval(&z, delta, true);
        let mut next;
        let mut fnext;
        loop {
            next = &z - &gz / lip;
            (fnext, _) = prob.eval(&next, delta, false);
            let diff = &next - &z;
            let bound = fz + gz.dot(&diff) + 0.5 * lip * diff.norm_squared();
            if fnext <= bound + 1e-15 * fz.abs() || lip > 1e16 {
                break;
            }
            lip *= 2.0;
        }
        if fnext > fx {
            // restart momentum
            z = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        fx = fnext;
        t = t_next;
        lip *= 0.9;
    }
    *y = x;
    max_iter
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::SupplyMode;

    #[test]
    fn memoryless_has_trivial_storage() {
        let real =
            LtiRealization::static_gain(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]));
        let sol = synthesize_storage(
            &real,
            &SupplyRateSpec::lossless(),
            &StorageOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.p.nrows(), 0);
        assert!(sol.lmi_max_eigenvalue <= 1e-12);
    }

    #[test]
    fn turbine_storage_satisfies_lmi() {
        let (ta, tb, k, lpc, lam) = (0.5, 2.0, 2.0, 1.0, 1.0);
        let real = LtiRealization::new(
            DMatrix::from_row_slice(2, 2, &[-1.0 / ta, 0.0, 1.0 / tb, -1.0 / tb]),
            DMatrix::from_row_slice(2, 2, &[k / ta, k / ta, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, lpc, lam, 0.0]),
        )
        .unwrap();
        let spec = SupplyRateSpec {
            eps1: 1e-3,
            eps2: 1e-3,
            mode: SupplyMode::BothPenalized,
        };
        let sol = synthesize_storage(&real, &spec, &StorageOptions::default()).unwrap();
        let l = lmi_matrix(&real, &spec, &sol.p);
        assert!(max_eig(&l) <= 1e-8);
        assert!(sol.min_eigenvalue_p >= 0.0);
    }

    #[test]
    fn infeasible_turbine_has_no_storage() {
        let real = LtiRealization::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[100.0, 100.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0]),
        )
        .unwrap();
        let r = synthesize_storage(
            &real,
            &SupplyRateSpec::lossless(),
            &StorageOptions {
                max_iter: 500,
                ..Default::default()
            },
        );
        assert!(r.is_err());
    }
}
