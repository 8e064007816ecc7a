//! Dissipativity certificates for bus device dynamics.
//!
//! The bus map `zeta = [-omega, p^c] -> y = [s, -d^u]` must be dissipative
//! with respect to
//! `W = y^T [[1, 1], [1, 0]] zeta - eps1 omega^2 - eps2 (p^c)^2`
//! (all quantities are deviations from an equilibrium). For LTI blocks this
//! is checked in the frequency domain through
//! `Pi(w) = G(jw)^* M + M G(jw) + K >= 0`, with `M = [[1, 1], [1, 0]] / 2`
//! and `K = -diag(eps1, eps2)`; a storage matrix is then synthesised as a
//! diagnostic.

mod passivity;
mod storage;

pub use passivity::{
    check_bus_passivity, BusAssembly, PassivityOptions, PassivityReport, TrialResult,
};
pub use storage::{lmi_matrix, synthesize_storage, StorageOptions, StorageSolution};

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::device::{BusDevices, Zeta};
use crate::error::{Error, Result};
use crate::lti::{LtiRealization, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplyMode {
    /// `eps1 > 0`, `eps2 > 0`.
    BothPenalized,
    /// `eps1 > 0`, `eps2 = 0`, plus no imaginary-axis zeros from `p^c` to `s`.
    FrequencyPenalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupplyRateSpec {
    pub eps1: f64,
    pub eps2: f64,
    pub mode: SupplyMode,
}

impl Default for SupplyRateSpec {
    fn default() -> Self {
        SupplyRateSpec {
            eps1: 1e-3,
            eps2: 1e-3,
            mode: SupplyMode::BothPenalized,
        }
    }
}

impl SupplyRateSpec {
    /// Plain `y^T [[1,1],[1,0]] zeta` supply (no penalty), used to build
    /// storage functions.
    pub const fn lossless() -> Self {
        SupplyRateSpec {
            eps1: 0.0,
            eps2: 0.0,
            mode: SupplyMode::BothPenalized,
        }
    }

    /// Checks the sign constraints the mode places on the penalties.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(self.eps1 >= 0.0 && self.eps2 >= 0.0)
            || !self.eps1.is_finite()
            || !self.eps2.is_finite()
        {
            return bad("eps1 and eps2 must be finite and nonnegative");
        }
        match self.mode {
            SupplyMode::BothPenalized if !(self.eps1 > 0.0 && self.eps2 > 0.0) => {
                bad("mode a requires eps1 > 0 and eps2 > 0")
            }
            SupplyMode::FrequencyPenalized if !(self.eps1 > 0.0 && self.eps2 == 0.0) => {
                bad("mode b requires eps1 > 0 and eps2 = 0")
            }
            _ => Ok(()),
        }
    }

    pub fn coupling() -> Matrix2<f64> {
        Matrix2::new(0.5, 0.5, 0.5, 0.0)
    }

    pub fn penalty(&self) -> Matrix2<f64> {
        Matrix2::new(-self.eps1, 0.0, 0.0, -self.eps2)
    }

    /// Full 4x4 form acting on `[y; zeta]`.
    pub fn q_full(&self) -> DMatrix<f64> {
        let m = Self::coupling();
        let k = self.penalty();
        let mut q = DMatrix::zeros(4, 4);
        for i in 0..2 {
            for j in 0..2 {
                q[(i, j + 2)] = m[(i, j)];
                q[(i + 2, j)] = m[(i, j)];
                q[(i + 2, j + 2)] = k[(i, j)];
            }
        }
        q
    }

    /// `Pi = G^* M + M G + K` for a 2x2 frequency response.
    pub fn frequency_form(&self, g: &DMatrix<C64>) -> [[C64; 2]; 2] {
        let m = Self::coupling();
        let k = self.penalty();
        let mut pi = [[C64::new(0.0, 0.0); 2]; 2];
        for (i, row) in pi.iter_mut().enumerate() {
            for (j, entry) in row.iter_mut().enumerate() {
                let mut v = C64::new(k[(i, j)], 0.0);
                for l in 0..2 {
                    v += g[(l, i)].conj() * m[(l, j)] + m[(i, l)] * g[(l, j)];
                }
                *entry = v;
            }
        }
        pi
    }
}

/// `y^T [[1,1],[1,0]] zeta - eps1 omega^2 - eps2 (p^c)^2` for deviations
/// `y = [s, -d^u]`, `zeta = [-omega, p^c]`.
pub fn supply_rate_eval(y: [f64; 2], zeta: [f64; 2], spec: &SupplyRateSpec) -> f64 {
    y[0] * (zeta[0] + zeta[1]) + y[1] * zeta[0]
        - spec.eps1 * zeta[0] * zeta[0]
        - spec.eps2 * zeta[1] * zeta[1]
}

/// Smallest eigenvalue of a 2x2 Hermitian matrix.
pub fn hermitian_min_eig(pi: &[[C64; 2]; 2]) -> f64 {
    let a = pi[0][0].re;
    let d = pi[1][1].re;
    let b = 0.5 * (pi[0][1] + pi[1][0].conj());
    0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMethod {
    /// Memoryless block: quadratic-form test, no storage needed.
    Memoryless,
    /// Frequency sweep plus a synthesised storage matrix.
    FrequencySweepWithStorage,
    /// Frequency sweep; storage synthesis failed or was not attempted.
    FrequencySweepOnly,
    /// Nonlinear dynamic block: declared, not certified.
    NotCertified,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub feasible: bool,
    pub method: CertificateMethod,
    /// Smallest eigenvalue of the frequency form over the sweep.
    pub margin: f64,
    /// Frequency (rad/s) at which the margin is attained; `null` for
    /// the infinite-frequency limit.
    pub worst_frequency: Option<f64>,
    pub storage: Option<Vec<Vec<f64>>>,
    pub lmi_max_eigenvalue: Option<f64>,
    pub imaginary_axis_zeros: Option<bool>,
    pub minimal: bool,
    pub spec: SupplyRateSpec,
    /// `(frequency, min eigenvalue)` samples of the sweep.
    pub sweep: Vec<(f64, f64)>,
    pub diagnostics: Vec<String>,
}

impl Certificate {
    pub fn storage_matrix(&self) -> Option<DMatrix<f64>> {
        let rows = self.storage.as_ref()?;
        let n = rows.len();
        Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Whether a storage function is available (trivially for memoryless
    /// blocks).
    pub fn has_storage(&self) -> bool {
        self.method == CertificateMethod::Memoryless || self.storage.is_some()
    }
}

fn matrix_rows(p: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..p.nrows())
        .map(|i| p.row(i).iter().copied().collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub w_min: f64,
    pub w_max: f64,
    pub coarse_per_decade: usize,
    /// Density used when refining around detected minima.
    pub fine_per_decade: usize,
    pub eig_tol: f64,
    pub synthesize: bool,
    pub storage: StorageOptions,
    pub minimal_tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            w_min: 1e-4,
            w_max: 1e4,
            coarse_per_decade: 100,
            fine_per_decade: 2000,
            eig_tol: 1e-9,
            synthesize: true,
            storage: StorageOptions::default(),
            minimal_tol: 1e-9,
        }
    }
}

/// Quadratic-form test for a memoryless block `y = D zeta`.
pub fn check_memoryless(d: &Matrix2<f64>, spec: &SupplyRateSpec) -> Certificate {
    let m = SupplyRateSpec::coupling();
    let form = d.transpose() * m + m * d + spec.penalty();
    let sym = 0.5 * (form + form.transpose());
    let eig = sym.symmetric_eigenvalues();
    let margin = eig.min();
    Certificate {
        feasible: margin >= -1e-12,
        method: CertificateMethod::Memoryless,
        margin,
        worst_frequency: None,
        storage: None,
        lmi_max_eigenvalue: None,
        imaginary_axis_zeros: None,
        minimal: true,
        spec: *spec,
        sweep: Vec::new(),
        diagnostics: Vec::new(),
    }
}

fn sweep_point(real: &LtiRealization, spec: &SupplyRateSpec, w: f64) -> Result<f64> {
    let g = real.frequency_response(w)?;
    Ok(hermitian_min_eig(&spec.frequency_form(&g)))
}

/// Frequency-domain dissipativity check of an LTI bus realization.
pub fn check_lti_dissipativity(
    real: &LtiRealization,
    spec: &SupplyRateSpec,
    opts: &SweepOptions,
) -> Result<Certificate> {
    if real.inputs() != 2 || real.outputs() != 2 {
        return Err(Error::Dimension {
            context: "bus realization must be 2x2",
            expected: 2,
            got: real.inputs().max(real.outputs()),
        });
    }
    real.require_hurwitz()?;
    let mut diagnostics = Vec::new();
    let minimal = real.is_minimal(opts.minimal_tol);
    if !minimal {
        diagnostics.push(
            "realization is not minimal; the frequency test only sees the minimal part".into(),
        );
    }

    let lo = opts.w_min.log10();
    let hi = opts.w_max.log10();
    let count = ((hi - lo) * opts.coarse_per_decade as f64).ceil() as usize + 1;
    let mut sweep = Vec::with_capacity(count + 2);
    sweep.push((0.0, sweep_point(real, spec, 0.0)?));
    for k in 0..count {
        let w = 10f64.powf(lo + (hi - lo) * k as f64 / (count - 1) as f64);
        sweep.push((w, sweep_point(real, spec, w)?));
    }
    let at_inf = sweep_point(real, spec, f64::INFINITY)?;

    // refine around interior local minima of the coarse grid
    let step = 1.0 / opts.coarse_per_decade as f64;
    let mut refined = Vec::new();
    for k in 1..sweep.len() - 1 {
        let (prev, cur, next) = (sweep[k - 1].1, sweep[k].1, sweep[k + 1].1);
        if cur <= prev && cur <= next {
            let center = sweep[k].0.max(opts.w_min).log10();
            let fine = (2.0 * step * opts.fine_per_decade as f64).ceil() as usize;
            for i in 0..=fine {
                let e = center - step + 2.0 * step * i as f64 / fine as f64;
                let w = 10f64.powf(e);
                refined.push((w, sweep_point(real, spec, w)?));
            }
        }
    }
    sweep.extend(refined);
    sweep.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (mut margin, mut worst) = (at_inf, None);
    for &(w, v) in &sweep {
        if v < margin {
            margin = v;
            worst = Some(w);
        }
    }
    let mut feasible = margin >= -opts.eig_tol;

    let mut zeros = None;
    if spec.mode == SupplyMode::FrequencyPenalized {
        let ok = !check_no_axis_zeros_inner(real, &mut diagnostics)?;
        zeros = Some(!ok);
        if !ok {
            diagnostics.push("p^c -> s path has zeros on the imaginary axis".into());
            feasible = false;
        }
    }

    let mut method = if real.states() == 0 {
        CertificateMethod::Memoryless
    } else {
        CertificateMethod::FrequencySweepOnly
    };
    let mut storage_rows = None;
    let mut lmi_eig = None;
    if feasible && opts.synthesize && real.states() > 0 {
        match synthesize_storage(real, spec, &opts.storage) {
            Ok(sol) => {
                method = CertificateMethod::FrequencySweepWithStorage;
                lmi_eig = Some(sol.lmi_max_eigenvalue);
                storage_rows = Some(matrix_rows(&sol.p));
            }
            Err(reason) => diagnostics.push(format!(
                "storage synthesis failed: {reason}; frequency-sweep only"
            )),
        }
    }

    Ok(Certificate {
        feasible,
        method,
        margin,
        worst_frequency: worst,
        storage: storage_rows,
        lmi_max_eigenvalue: lmi_eig,
        imaginary_axis_zeros: zeros,
        minimal,
        spec: *spec,
        sweep,
        diagnostics,
    })
}

/// True iff the `p^c -> s` path has no zeros on the imaginary axis.
pub fn check_no_axis_zeros(real: &LtiRealization) -> Result<bool> {
    let mut diag = Vec::new();
    Ok(!check_no_axis_zeros_inner(real, &mut diag)?)
}

/// Returns true when an imaginary-axis zero is present.
fn check_no_axis_zeros_inner(real: &LtiRealization, diag: &mut Vec<String>) -> Result<bool> {
    let zeros = transmission_zeros(&real.subsystem(0, real.inputs() - 1))?;
    let on_axis: Vec<C64> = zeros
        .into_iter()
        .filter(|z| z.re.abs() <= 1e-7 * (1.0 + z.norm()))
        .collect();
    if !on_axis.is_empty() {
        diag.push(format!(
            "imaginary-axis zeros at {}",
            on_axis
                .iter()
                .map(|z| format!("{:.6}{:+.6}j", z.re, z.im))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    Ok(!on_axis.is_empty())
}

/// Finite zeros of a SISO realization from the Rosenbrock pencil
/// `[[A - zI, B], [C, D]]`.
pub fn transmission_zeros(siso: &LtiRealization) -> Result<Vec<C64>> {
    let n = siso.states();
    if n == 0 {
        if siso.d[(0, 0)] == 0.0 {
            return Err(Error::DegeneratePencil(
                "transfer function is identically zero".into(),
            ));
        }
        return Ok(Vec::new());
    }
    let mut s = DMatrix::zeros(n + 1, n + 1);
    s.view_mut((0, 0), (n, n)).copy_from(&siso.a);
    s.view_mut((0, n), (n, 1)).copy_from(&siso.b);
    s.view_mut((n, 0), (1, n)).copy_from(&siso.c);
    s[(n, n)] = siso.d[(0, 0)];
    let mut e = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        e[(i, i)] = 1.0;
    }
    let scale = 1.0 + s.amax();
    for sigma in [0.3719, -1.1373, 2.6931, -5.4321, 11.1111] {
        let sigma = sigma * scale;
        let shifted = &s - &e * sigma;
        let lu = shifted.lu();
        let Some(inv_e) = lu.solve(&e) else { continue };
        if inv_e.iter().any(|v| !v.is_finite()) || inv_e.amax() > 1e12 {
            continue;
        }
        let mus = inv_e.complex_eigenvalues();
        let big = mus.iter().map(|m| m.norm()).fold(0.0, f64::max);
        let zeros = mus
            .iter()
            .filter(|m| m.norm() > 1e-10 * big.max(1e-300))
            .map(|m| C64::new(sigma, 0.0) + C64::new(1.0, 0.0) / m)
            .collect();
        return Ok(zeros);
    }
    Err(Error::DegeneratePencil(
        "pencil singular at every trial shift (transfer identically zero)".into(),
    ))
}

/// Storage available for a bus's device states.
#[derive(Clone)]
pub enum BusStorage {
    /// Bus has no device states.
    Memoryless,
    /// `V = x~^T P x~` over the stacked bus state.
    Quadratic(DMatrix<f64>),
    /// User-declared storage of a single nonlinear block `V(x, x_eq)`.
    Declared {
        offset: usize,
        dim: usize,
        f: Arc<crate::device::StorageFn>,
    },
    Unavailable(String),
}

impl std::fmt::Debug for BusStorage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BusStorage::Memoryless => write!(f, "Memoryless"),
            BusStorage::Quadratic(p) => write!(f, "Quadratic({}x{})", p.nrows(), p.ncols()),
            BusStorage::Declared { offset, dim, .. } => write!(f, "Declared({offset}, {dim})"),
            BusStorage::Unavailable(r) => write!(f, "Unavailable({r})"),
        }
    }
}

impl BusStorage {
    pub fn is_available(&self) -> bool {
        !matches!(self, BusStorage::Unavailable(_))
    }

    /// `V^D(x)` relative to `x_eq`.
    pub fn eval(&self, x: &[f64], x_eq: &[f64]) -> f64 {
        match self {
            BusStorage::Memoryless | BusStorage::Unavailable(_) => 0.0,
            BusStorage::Quadratic(p) => {
                let n = p.nrows();
                let mut v = 0.0;
                for i in 0..n {
                    let di = x[i] - x_eq[i];
                    for j in 0..n {
                        v += di * p[(i, j)] * (x[j] - x_eq[j]);
                    }
                }
                v
            }
            BusStorage::Declared { offset, dim, f } => {
                f(&x[*offset..offset + dim], &x_eq[*offset..offset + dim])
            }
        }
    }
}

/// Storage for the device states of a bus around an equilibrium.
pub fn bus_storage(
    devices: &BusDevices,
    x_eq: &[f64],
    z_eq: Zeta,
    opts: &StorageOptions,
) -> BusStorage {
    if devices.state_dim() == 0 {
        return BusStorage::Memoryless;
    }
    let stateful: Vec<_> = devices.blocks().filter(|b| b.state_dim() > 0).collect();
    if stateful.iter().all(|b| b.is_linear()) {
        let real = match devices.realization(x_eq, z_eq, 1e-6) {
            Ok(r) => r,
            Err(e) => return BusStorage::Unavailable(e.to_string()),
        };
        if !real.is_hurwitz() {
            return BusStorage::Unavailable("device dynamics are not Hurwitz".into());
        }
        return match synthesize_storage(&real, &SupplyRateSpec::lossless(), opts) {
            Ok(sol) => BusStorage::Quadratic(sol.p),
            Err(reason) => BusStorage::Unavailable(format!("storage synthesis failed: {reason}")),
        };
    }
    if stateful.len() == 1 {
        if let Some(f) = stateful[0].declared_storage() {
            let mut offset = 0;
            for b in devices.blocks() {
                if std::ptr::eq(b, stateful[0]) {
                    break;
                }
                offset += b.state_dim();
            }
            return BusStorage::Declared {
                offset,
                dim: stateful[0].state_dim(),
                f,
            };
        }
    }
    BusStorage::Unavailable("nonlinear dynamic block without declared storage".into())
}

/// Certificate for the devices of one bus at an equilibrium input.
pub fn certify_bus(
    devices: &BusDevices,
    z_eq: Zeta,
    spec: &SupplyRateSpec,
    opts: &SweepOptions,
) -> Result<Certificate> {
    let (x_eq, _) = devices.equilibrium(z_eq)?;
    let nonlinear_dynamic = devices
        .blocks()
        .any(|b| b.state_dim() > 0 && !b.is_linear());
    let real = devices.realization(&x_eq, z_eq, 1e-6)?;
    if real.states() == 0 {
        let d = Matrix2::new(
            real.d[(0, 0)],
            real.d[(0, 1)],
            real.d[(1, 0)],
            real.d[(1, 1)],
        );
        let mut cert = check_memoryless(&d, spec);
        if spec.mode == SupplyMode::FrequencyPenalized {
            let ok = check_no_axis_zeros(&real).unwrap_or(false);
            cert.imaginary_axis_zeros = Some(!ok);
            cert.feasible &= ok;
        }
        return Ok(cert);
    }
    let mut cert = check_lti_dissipativity(&real, spec, opts)?;
    if nonlinear_dynamic {
        cert.method = CertificateMethod::NotCertified;
        cert.diagnostics.push(
            "nonlinear dynamic block: declared, not certified (linearization checked only)".into(),
        );
    }
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceBlock, DeviceModel, Role};
    use crate::oslc::{Bounds, CostFunction, PriceSignal};
    use crate::turbine::SecondOrderTurbineParams;

    fn spec(e1: f64, e2: f64) -> SupplyRateSpec {
        SupplyRateSpec {
            eps1: e1,
            eps2: e2,
            mode: SupplyMode::BothPenalized,
        }
    }

    /// Static supply `s = p^c - omega` plus damping `lambda omega`, in
    /// zeta coordinates.
    fn static_d(lambda: f64) -> Matrix2<f64> {
        Matrix2::new(1.0, 1.0, lambda, 0.0)
    }

    /// Oracle on `(omega, p^c)`: `[[1 + lambda - eps1, -1], [-1, 1 - eps2]]`.
    fn oracle_det(lambda: f64, eps: f64) -> f64 {
        (1.0 + lambda - eps) * (1.0 - eps) - 1.0
    }

    #[test]
    fn supply_rate_examples() {
        let s = spec(0.0, 0.0);
        assert_eq!(supply_rate_eval([0.0; 2], [0.0; 2], &s), 0.0);
        assert_eq!(supply_rate_eval([1.0, 0.0], [0.0, 1.0], &s), 1.0);
        assert_eq!(supply_rate_eval([0.0, 1.0], [-1.0, 0.0], &s), -1.0);
    }

    #[test]
    fn memoryless_examples() {
        let c = check_memoryless(&static_d(1.0), &spec(0.1, 0.1));
        assert!(c.feasible);
        assert!((oracle_det(1.0, 0.1) - 0.71).abs() < 1e-12);
        let c = check_memoryless(&static_d(0.0), &spec(0.1, 0.1));
        assert!(!c.feasible);
        assert!((oracle_det(0.0, 0.1) + 0.19).abs() < 1e-12);
        let c = check_memoryless(&static_d(0.0), &spec(0.0, 0.0));
        assert!(c.feasible);
        assert!(c.margin.abs() < 1e-12);
    }

    #[test]
    fn lifted_memoryless_agrees() {
        for (lambda, eps) in [(1.0, 0.1), (0.0, 0.1), (0.0, 0.0), (0.3, 0.05)] {
            let d = static_d(lambda);
            let real = LtiRealization::static_gain(DMatrix::from_row_slice(
                2,
                2,
                &[d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(1, 1)]],
            ));
            let a = check_memoryless(&d, &spec(eps, eps));
            let b =
                check_lti_dissipativity(&real, &spec(eps, eps), &SweepOptions::default()).unwrap();
            assert_eq!(a.feasible, b.feasible, "lambda {lambda} eps {eps}");
            assert!((a.margin - b.margin).abs() < 1e-12);
        }
    }

    fn turbine_bus(k: f64, tau_a: f64, tau_b: f64, lpc: f64, lambda: f64) -> BusDevices {
        BusDevices {
            supply: Some(
                DeviceBlock::new(
                    Role::Supply,
                    DeviceModel::SecondOrderTurbine(SecondOrderTurbineParams {
                        k,
                        tau_a,
                        tau_b,
                        lambda_pc: lpc,
                    }),
                )
                .unwrap(),
            ),
            demand: None,
            damping: Some(DeviceBlock::linear_damping(lambda).unwrap()),
        }
    }

    #[test]
    fn turbine_certificates() {
        let bus = turbine_bus(1.0, 1.0, 1.0, 1.0, 1.0);
        let cert = certify_bus(
            &bus,
            Zeta::default(),
            &spec(0.01, 0.01),
            &SweepOptions::default(),
        )
        .unwrap();
        assert!(cert.feasible, "{cert:?}");
        assert_eq!(cert.method, CertificateMethod::FrequencySweepWithStorage);
        assert!(cert.lmi_max_eigenvalue.unwrap() <= 1e-8);

        let bus = turbine_bus(100.0, 1.0, 1.0, 0.1, 0.1);
        let cert = certify_bus(
            &bus,
            Zeta::default(),
            &spec(0.01, 0.01),
            &SweepOptions::default(),
        )
        .unwrap();
        assert!(!cert.feasible);
        assert!(cert.margin < 0.0);
        assert!(cert.worst_frequency.is_some());
    }

    #[test]
    fn dense_grid_oracle_agrees_on_turbine_margin() {
        let bus = turbine_bus(100.0, 1.0, 1.0, 0.1, 0.1);
        let (x, _) = bus.equilibrium(Zeta::default()).unwrap();
        let real = bus.realization(&x, Zeta::default(), 1e-6).unwrap();
        let s = spec(0.01, 0.01);
        let cert = check_lti_dissipativity(&real, &s, &SweepOptions::default()).unwrap();
        // 1e5 log-spaced points, closed-form second-order response
        let mut dense = f64::INFINITY;
        for i in 0..100_000 {
            let w = 10f64.powf(-4.0 + 8.0 * i as f64 / 99_999.0);
            let jw = C64::new(0.0, w);
            let h = C64::new(100.0, 0.0) / ((jw + 1.0) * (jw + 1.0));
            let g = DMatrix::from_row_slice(
                2,
                2,
                &[h, h + 0.1, C64::new(0.1, 0.0), C64::new(0.0, 0.0)],
            );
            dense = dense.min(hermitian_min_eig(&s.frequency_form(&g)));
        }
        assert!(dense < 0.0);
        assert!(
            (cert.margin - dense).abs() < 1e-3 * dense.abs(),
            "{} vs {dense}",
            cert.margin
        );
    }

    #[test]
    fn zero_tests() {
        let first = BusDevices {
            supply: Some(
                DeviceBlock::first_order(
                    Role::Supply,
                    1.0,
                    CostFunction::quadratic(1.0).unwrap(),
                    PriceSignal::default(),
                )
                .unwrap(),
            ),
            demand: None,
            damping: Some(DeviceBlock::linear_damping(1.0).unwrap()),
        };
        let (x, _) = first.equilibrium(Zeta::default()).unwrap();
        let real = first.realization(&x, Zeta::default(), 1e-6).unwrap();
        assert!(check_no_axis_zeros(&real).unwrap());

        // (s^2 + 1) / (s + 1)^2 = 1 + (-2 s) / (s^2 + 2 s + 1)
        let siso = LtiRealization::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!(!check_no_axis_zeros(&siso).unwrap());
        let zeros = transmission_zeros(&siso.subsystem(0, 1)).unwrap();
        assert_eq!(zeros.len(), 2);
        assert!(zeros
            .iter()
            .all(|z| z.re.abs() < 1e-9 && (z.im.abs() - 1.0).abs() < 1e-9));

        let gain =
            LtiRealization::static_gain(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]));
        assert!(check_no_axis_zeros(&gain).unwrap());
        let zero = LtiRealization::static_gain(DMatrix::zeros(2, 2));
        assert!(matches!(
            check_no_axis_zeros(&zero),
            Err(Error::DegeneratePencil(_))
        ));
    }

    #[test]
    fn mode_b_for_first_order_supply() {
        let bus = BusDevices {
            supply: Some(
                DeviceBlock::first_order(
                    Role::Supply,
                    2.0,
                    CostFunction::quadratic(1.0).unwrap(),
                    PriceSignal::default(),
                )
                .unwrap(),
            ),
            demand: None,
            damping: Some(DeviceBlock::linear_damping(1.0).unwrap()),
        };
        let b = SupplyRateSpec {
            eps1: 1e-3,
            eps2: 0.0,
            mode: SupplyMode::FrequencyPenalized,
        };
        let cert = certify_bus(&bus, Zeta::default(), &b, &SweepOptions::default()).unwrap();
        assert!(cert.feasible, "{cert:?}");
        assert_eq!(cert.imaginary_axis_zeros, Some(false));
        // without feedthrough the strict version fails at high frequency
        let a = certify_bus(
            &bus,
            Zeta::default(),
            &spec(1e-3, 1e-3),
            &SweepOptions::default(),
        )
        .unwrap();
        assert!(!a.feasible);
        assert!(a.margin < -0.5e-3);
    }

    #[test]
    fn lag_storage_matches_analytic() {
        let tau = 2.0;
        let kappa = 0.5;
        let bus = BusDevices {
            supply: Some(
                DeviceBlock::lag_oslc(
                    Role::Supply,
                    tau,
                    CostFunction::quadratic(kappa).unwrap(),
                    Bounds::unbounded(),
                    PriceSignal::default(),
                )
                .unwrap(),
            ),
            demand: None,
            damping: Some(DeviceBlock::linear_damping(1.0).unwrap()),
        };
        let (x, _) = bus.equilibrium(Zeta::default()).unwrap();
        match bus_storage(&bus, &x, Zeta::default(), &StorageOptions::default()) {
            BusStorage::Quadratic(p) => {
                assert!((p[(0, 0)] - tau * kappa / 2.0).abs() < 1e-6, "{p}")
            }
            other => panic!("unexpected storage {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SupplyRateSpec::default().validate().is_ok());
        assert!(spec(0.0, 0.1).validate().is_err());
        let b = SupplyRateSpec {
            eps1: 0.1,
            eps2: 0.1,
            mode: SupplyMode::FrequencyPenalized,
        };
        assert!(b.validate().is_err());
    }
}
