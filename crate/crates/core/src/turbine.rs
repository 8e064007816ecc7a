//! Turbine-governor supply models.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::device::Zeta;
use crate::error::{Error, Result};
use crate::lti::{LtiRealization, C64};

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

/// Second-order turbine-governor:
/// `tau_a a' = K (p^c - omega) - a`, `tau_b z' = a - z`,
/// `p^M = z + lambda_pc p^c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderTurbineParams {
    pub k: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub lambda_pc: f64,
}

impl SecondOrderTurbineParams {
    pub fn validate(&self) -> Result<()> {
        check_positive("k", self.k)?;
        check_positive("tau_a", self.tau_a)?;
        check_positive("tau_b", self.tau_b)?;
        check_positive("lambda_pc", self.lambda_pc)
    }

    /// Whether the gains lie in the region `K < 8 lambda_pc`,
    /// `lambda_pc <= lambda` used for tuning. Logs a warning when not.
    pub fn in_tuning_region(&self, damping: f64) -> bool {
        let ok = self.k < 8.0 * self.lambda_pc && self.lambda_pc <= damping;
        if !ok {
            warn!(
                "second-order turbine K = {}, lambda_pc = {}, lambda = {} is outside K < 8 lambda_pc, lambda_pc <= lambda",
                self.k, self.lambda_pc, damping
            );
        }
        ok
    }

    pub fn implied_cost_coefficient(&self) -> f64 {
        1.0 / (self.k + self.lambda_pc)
    }

    pub(crate) fn deriv(&self, x: &[f64], z: Zeta, dx: &mut [f64]) {
        let u = self.k * (z.pc + z.neg_omega);
        dx[0] = (u - x[0]) / self.tau_a;
        dx[1] = (x[0] - x[1]) / self.tau_b;
    }

    pub(crate) fn output(&self, x: &[f64], z: Zeta) -> f64 {
        x[1] + self.lambda_pc * z.pc
    }

    pub(crate) fn equilibrium(&self, z: Zeta) -> (Vec<f64>, f64) {
        let u = self.k * (z.pc + z.neg_omega);
        (vec![u, u], u + self.lambda_pc * z.pc)
    }

    pub(crate) fn realization(&self) -> LtiRealization {
        let (ta, tb, k) = (self.tau_a, self.tau_b, self.k);
        LtiRealization {
            a: DMatrix::from_row_slice(2, 2, &[-1.0 / ta, 0.0, 1.0 / tb, -1.0 / tb]),
            b: DMatrix::from_row_slice(2, 2, &[k / ta, k / ta, 0.0, 0.0]),
            c: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            d: DMatrix::from_row_slice(1, 2, &[0.0, self.lambda_pc]),
        }
    }
}

/// Fifth-order turbine-governor model
/// `G(s) = K / (1 + s T_s) * (1 + s T_3)/(1 + s T_c) * (1 + s T_4)/(1 + s T_5)`
/// driven by `p^c - omega`, with `p^M = G (p^c - omega) + lambda_pc p^c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FifthOrderTurbineParams {
    pub k: f64,
    pub t_s: f64,
    pub t_3: f64,
    pub t_c: f64,
    pub t_4: f64,
    pub t_5: f64,
    pub lambda_pc: f64,
}

impl Default for FifthOrderTurbineParams {
    /// Round representative values (synthetic, not taken from any dataset).
    fn default() -> Self {
        FifthOrderTurbineParams {
            k: 2.0,
            t_s: 0.1,
            t_3: 0.0,
            t_c: 0.5,
            t_4: 1.25,
            t_5: 5.0,
            lambda_pc: 1.0,
        }
    }
}

impl FifthOrderTurbineParams {
    pub fn validate(&self) -> Result<()> {
        check_positive("k", self.k)?;
        check_positive("t_s", self.t_s)?;
        check_positive("t_c", self.t_c)?;
        check_positive("t_5", self.t_5)?;
        check_positive("lambda_pc", self.lambda_pc)?;
        for (name, v) in [("t_3", self.t_3), ("t_4", self.t_4)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn implied_cost_coefficient(&self) -> f64 {
        1.0 / (self.k + self.lambda_pc)
    }

    fn ratios(&self) -> (f64, f64) {
        (self.t_3 / self.t_c, self.t_4 / self.t_5)
    }

    /// Factored transfer function `G(s)`.
    pub fn transfer(&self, s: C64) -> C64 {
        let one = C64::new(1.0, 0.0);
        C64::new(self.k, 0.0) / (one + s * self.t_s) * (one + s * self.t_3) / (one + s * self.t_c)
            * (one + s * self.t_4)
            / (one + s * self.t_5)
    }

    pub(crate) fn deriv(&self, x: &[f64], z: Zeta, dx: &mut [f64]) {
        let (r2, _) = self.ratios();
        let u = self.k * (z.pc + z.neg_omega);
        dx[0] = (u - x[0]) / self.t_s;
        dx[1] = (x[0] - x[1]) / self.t_c;
        let o2 = r2 * x[0] + (1.0 - r2) * x[1];
        dx[2] = (o2 - x[2]) / self.t_5;
    }

    pub(crate) fn output(&self, x: &[f64], z: Zeta) -> f64 {
        let (r2, r3) = self.ratios();
        let o2 = r2 * x[0] + (1.0 - r2) * x[1];
        r3 * o2 + (1.0 - r3) * x[2] + self.lambda_pc * z.pc
    }

    pub(crate) fn equilibrium(&self, z: Zeta) -> (Vec<f64>, f64) {
        let u = self.k * (z.pc + z.neg_omega);
        (vec![u, u, u], u + self.lambda_pc * z.pc)
    }

    /// Three-state realization of the device map `zeta -> p^M`.
    pub(crate) fn realization(&self) -> LtiRealization {
        let g = self.cascade();
        // input u = K (p^c - omega) = K (zeta_1 + zeta_2); the cascade
        // already carries K, so B is duplicated across both inputs.
        let n = g.states();
        let mut b = DMatrix::zeros(n, 2);
        for i in 0..n {
            b[(i, 0)] = g.b[(i, 0)];
            b[(i, 1)] = g.b[(i, 0)];
        }
        let d = DMatrix::from_row_slice(1, 2, &[g.d[(0, 0)], g.d[(0, 0)] + self.lambda_pc]);
        LtiRealization {
            a: g.a,
            b,
            c: g.c,
            d,
        }
    }

    /// Unreduced cascade realization of `G` (single input `p^c - omega`).
    fn cascade(&self) -> LtiRealization {
        let (r2, r3) = self.ratios();
        let (ts, tc, t5, k) = (self.t_s, self.t_c, self.t_5, self.k);
        LtiRealization {
            a: DMatrix::from_row_slice(
                3,
                3,
                &[
                    -1.0 / ts,
                    0.0,
                    0.0,
                    1.0 / tc,
                    -1.0 / tc,
                    0.0,
                    r2 / t5,
                    (1.0 - r2) / t5,
                    -1.0 / t5,
                ],
            ),
            b: DMatrix::from_row_slice(3, 1, &[k / ts, 0.0, 0.0]),
            c: DMatrix::from_row_slice(1, 3, &[r3 * r2, r3 * (1.0 - r2), 1.0 - r3]),
            d: DMatrix::zeros(1, 1),
        }
    }
}

/// Realization of the governor transfer function with any exact
/// pole/zero cancellations removed.
#[derive(Debug, Clone, PartialEq)]
pub struct GovernorRealization {
    /// Single input `p^c - omega`, single output `G (p^c - omega)`.
    pub realization: LtiRealization,
    pub cancellations: Vec<String>,
    pub minimal: bool,
}

/// Builds a minimal realization of the fifth-order governor `G(s)`.
///
/// A lead/lag section whose lead and lag constants agree to `tol`
/// (relative) is a unity factor and is dropped; each drop is reported.
pub fn tf_to_state_space(
    params: &FifthOrderTurbineParams,
    tol: f64,
) -> Result<GovernorRealization> {
    params.validate()?;
    let mut cancellations = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let mut sections: Vec<(f64, f64)> = Vec::new(); // (lead, lag), lag > 0
    for (name, lead, lag) in [
        ("T_3/T_c", params.t_3, params.t_c),
        ("T_4/T_5", params.t_4, params.t_5),
    ] {
        if close(lead, lag) {
            cancellations.push(format!("{name}: zero at {:.6} cancels pole", -1.0 / lag));
        } else {
            sections.push((lead, lag));
        }
    }
    // a lead constant equal to T_s cancels the governor lag as well
    if let Some(pos) = sections
        .iter()
        .position(|&(lead, _)| close(lead, params.t_s))
    {
        let (_, lag) = sections.remove(pos);
        cancellations.push(format!(
            "T_s: zero at {:.6} cancels the governor pole",
            -1.0 / params.t_s
        ));
        // K/(1+sT_s) * (1+sT_s)/(1+s lag) = K/(1+s lag)
        return Ok(build_cascade(params.k, lag, &sections, cancellations));
    }
    Ok(build_cascade(
        params.k,
        params.t_s,
        &sections,
        cancellations,
    ))
}

fn build_cascade(
    k: f64,
    t_first: f64,
    sections: &[(f64, f64)],
    cancellations: Vec<String>,
) -> GovernorRealization {
    let n = 1 + sections.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 1);
    a[(0, 0)] = -1.0 / t_first;
    b[(0, 0)] = k / t_first;
    // output of section i as a row over the states
    let mut out = DMatrix::zeros(1, n);
    out[(0, 0)] = 1.0;
    for (i, &(lead, lag)) in sections.iter().enumerate() {
        let s = i + 1;
        let r = lead / lag;
        for j in 0..n {
            a[(s, j)] = out[(0, j)] / lag;
        }
        a[(s, s)] -= 1.0 / lag;
        let mut next = out.clone() * r;
        next[(0, s)] += 1.0 - r;
        out = next;
    }
    let realization = LtiRealization {
        a,
        b,
        c: out,
        d: DMatrix::zeros(1, 1),
    };
    let minimal = realization.is_minimal(1e-10);
    GovernorRealization {
        realization,
        cancellations,
        minimal,
    }
}
