//! Linear time-invariant realizations `(A, B, C, D)`.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// State-space realization `x' = Ax + Bu`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiRealization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiRealization {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension {
                context: "A must be square",
                expected: n,
                got: a.ncols(),
            });
        }
        if b.nrows() != n {
            return Err(Error::Dimension {
                context: "rows of B",
                expected: n,
                got: b.nrows(),
            });
        }
        if c.ncols() != n {
            return Err(Error::Dimension {
                context: "columns of C",
                expected: n,
                got: c.ncols(),
            });
        }
        if d.nrows() != c.nrows() {
            return Err(Error::Dimension {
                context: "rows of D",
                expected: c.nrows(),
                got: d.nrows(),
            });
        }
        if d.ncols() != b.ncols() {
            return Err(Error::Dimension {
                context: "columns of D",
                expected: b.ncols(),
                got: d.ncols(),
            });
        }
        let all = a.iter().chain(b.iter()).chain(c.iter()).chain(d.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "realization has non-finite entries".into(),
            ));
        }
        Ok(LtiRealization { a, b, c, d })
    }

    /// Memoryless system `y = D u`.
    pub fn static_gain(d: DMatrix<f64>) -> Self {
        let (p, m) = d.shape();
        LtiRealization {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, m),
            c: DMatrix::zeros(p, 0),
            d,
        }
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `G(s) = C (sI - A)^{-1} B + D`.
    pub fn transfer(&self, s: C64) -> Result<DMatrix<C64>> {
        let n = self.states();
        let d = self.d.map(|v| C64::new(v, 0.0));
        if n == 0 {
            return Ok(d);
        }
        let mut m = self.a.map(|v| C64::new(-v, 0.0));
        for i in 0..n {
            m[(i, i)] += s;
        }
        let b = self.b.map(|v| C64::new(v, 0.0));
        let x = m
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::NonFinite(format!("sI - A is singular at s = {s}")))?;
        Ok(self.c.map(|v| C64::new(v, 0.0)) * x + d)
    }

    /// `G(j w)`; `w = +inf` returns `D`.
    pub fn frequency_response(&self, w: f64) -> Result<DMatrix<C64>> {
        if w.is_infinite() {
            return Ok(self.d.map(|v| C64::new(v, 0.0)));
        }
        self.transfer(C64::new(0.0, w))
    }

    pub fn eigenvalues(&self) -> Vec<C64> {
        if self.states() == 0 {
            return Vec::new();
        }
        self.a.complex_eigenvalues().iter().copied().collect()
    }

    /// Largest real part of the eigenvalues of `A` (`-inf` when `n = 0`).
    pub fn spectral_abscissa(&self) -> f64 {
        self.eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_hurwitz(&self) -> bool {
        self.spectral_abscissa() < 0.0
    }

    pub fn require_hurwitz(&self) -> Result<()> {
        let max_real = self.spectral_abscissa();
        if max_real < 0.0 {
            Ok(())
        } else {
            Err(Error::NotHurwitz { max_real })
        }
    }

    pub fn controllability_rank(&self, tol: f64) -> usize {
        let n = self.states();
        if n == 0 {
            return 0;
        }
        let m = self.inputs();
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        numerical_rank(&ctrb, tol)
    }

    pub fn observability_rank(&self, tol: f64) -> usize {
        let n = self.states();
        if n == 0 {
            return 0;
        }
        let p = self.outputs();
        let mut obsv = DMatrix::zeros(n * p, n);
        let mut block = self.c.clone();
        for k in 0..n {
            obsv.view_mut((k * p, 0), (p, n)).copy_from(&block);
            block *= &self.a;
        }
        numerical_rank(&obsv, tol)
    }

    /// Controllable and observable to relative tolerance `tol`.
    pub fn is_minimal(&self, tol: f64) -> bool {
        let n = self.states();
        n == 0 || (self.controllability_rank(tol) == n && self.observability_rank(tol) == n)
    }

    /// Single-input single-output sub-path from input `j` to output `i`.
    pub fn subsystem(&self, i: usize, j: usize) -> LtiRealization {
        LtiRealization {
            a: self.a.clone(),
            b: self.b.columns(j, 1).into_owned(),
            c: self.c.rows(i, 1).into_owned(),
            d: DMatrix::from_element(1, 1, self.d[(i, j)]),
        }
    }

    /// Block-diagonal state stacking of systems sharing the same input,
    /// with outputs combined through `weights[k]` rows:
    /// `y = sum_k W_k y_k`.
    pub fn combine(
        parts: &[(LtiRealization, DMatrix<f64>)],
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let n: usize = parts.iter().map(|(r, _)| r.states()).sum();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, inputs);
        let mut c = DMatrix::zeros(outputs, n);
        let mut d = DMatrix::zeros(outputs, inputs);
        let mut off = 0;
        for (r, w) in parts {
            let k = r.states();
            a.view_mut((off, off), (k, k)).copy_from(&r.a);
            b.view_mut((off, 0), (k, inputs)).copy_from(&r.b);
            c.view_mut((0, off), (outputs, k)).copy_from(&(w * &r.c));
            d += w * &r.d;
            off += k;
        }
        LtiRealization { a, b, c, d }
    }
}

/// Rank from singular values above `tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_order() -> LtiRealization {
        LtiRealization::new(
            DMatrix::from_element(1, 1, -2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap()
    }

    #[test]
    fn transfer_matches_closed_form() {
        let sys = first_order();
        let s = C64::new(0.3, 1.7);
        let g = sys.transfer(s).unwrap()[(0, 0)];
        let expected = C64::new(3.0, 0.0) / (s + 2.0) + 0.5;
        assert!((g - expected).norm() < 1e-14);
        assert_eq!(
            sys.frequency_response(f64::INFINITY).unwrap()[(0, 0)],
            C64::new(0.5, 0.0)
        );
    }

    #[test]
    fn hurwitz_and_minimality() {
        let sys = first_order();
        assert!(sys.is_hurwitz());
        assert!(sys.is_minimal(1e-9));
        let unstable = LtiRealization::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.1]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(!unstable.is_hurwitz());
        assert!(matches!(
            unstable.require_hurwitz(),
            Err(Error::NotHurwitz { .. })
        ));
        let hidden = LtiRealization::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(!hidden.is_minimal(1e-9));
    }

    #[test]
    fn dimension_errors() {
        let r = LtiRealization::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
