//! Generation, controllable-demand and damping blocks.
//!
//! Every block sees the local input `zeta = [-omega, p^c]` (damping blocks
//! only use the first entry) and produces one scalar output: `p^M` for a
//! supply block, `d^c` for a demand block and `d^u` for a damping block.
//! The bus net supply is `s = p^M - d^c`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::LtiRealization;
use crate::numerics::{newton, NewtonOptions};
use crate::oslc::{Bounds, CostFunction, PriceSignal, StaticMap};
use crate::turbine::{FifthOrderTurbineParams, SecondOrderTurbineParams};

/// Local device input `[-omega, p^c]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Zeta {
    pub neg_omega: f64,
    pub pc: f64,
}

impl Zeta {
    pub const fn new(neg_omega: f64, pc: f64) -> Self {
        Zeta { neg_omega, pc }
    }

    pub fn from_omega(omega: f64, pc: f64) -> Self {
        Zeta {
            neg_omega: -omega,
            pc,
        }
    }

    pub fn omega(&self) -> f64 {
        -self.neg_omega
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Supply,
    Demand,
    Damping,
}

impl Role {
    fn oslc_sign(self) -> f64 {
        match self {
            Role::Demand => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Supply => "supply",
            Role::Demand => "demand",
            Role::Damping => "damping",
        })
    }
}

/// First-order lead/lag filter on the power-command channel,
/// `(1 + s T_lead) / (1 + s T_lag)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct LeadLag {
    pub t_lead: f64,
    pub t_lag: f64,
}

impl LeadLag {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_lag > 0.0)
            || !(self.t_lead >= 0.0)
            || !self.t_lead.is_finite()
            || !self.t_lag.is_finite()
        {
            return Err(Error::InvalidParameter(format!(
                "lead/lag filter needs t_lag > 0 and t_lead >= 0, got ({}, {})",
                self.t_lead, self.t_lag
            )));
        }
        Ok(())
    }

    fn ratio(&self) -> f64 {
        self.t_lead / self.t_lag
    }
}

type DerivFn = dyn Fn(&[f64], Zeta, &mut [f64]) + Send + Sync;
type OutputFn = dyn Fn(&[f64], Zeta) -> f64 + Send + Sync;
pub type StorageFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// User-defined block given by derivative and output callables.
#[derive(Clone)]
pub struct CustomBlock {
    pub name: String,
    pub dim: usize,
    pub derivative: Arc<DerivFn>,
    pub output: Arc<OutputFn>,
    /// Cost whose inverse marginal is the block's steady-state map, if the
    /// block takes part in the dispatch.
    pub cost: Option<CostFunction>,
    pub bounds: Bounds,
    /// Analytic storage `V(x, x_eq)` for nonlinear blocks.
    pub storage: Option<Arc<StorageFn>>,
    pub linear: bool,
}

impl fmt::Debug for CustomBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomBlock")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("linear", &self.linear)
            .finish()
    }
}

impl PartialEq for CustomBlock {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.dim == other.dim
            && Arc::ptr_eq(&self.derivative, &other.derivative)
            && Arc::ptr_eq(&self.output, &other.output)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceModel {
    /// Memoryless `clip((C')^{-1}(sign f(zeta)))`.
    StaticOslc(StaticMap),
    /// `x' = -mu (C'(x) - sign f(zeta))`, output `x`.
    FirstOrder {
        mu: f64,
        cost: CostFunction,
        sign: f64,
        signal: PriceSignal,
    },
    /// `tau x' = k(zeta) - x`, output `x`, with `k` the static map.
    LagOslc {
        tau: f64,
        map: StaticMap,
    },
    SecondOrderTurbine(SecondOrderTurbineParams),
    FifthOrderTurbine(FifthOrderTurbineParams),
    /// `d^u = lambda omega`.
    LinearDamping {
        lambda: f64,
    },
    /// `tau x' = lambda omega - x`, `d^u = x`.
    LagDamping {
        lambda: f64,
        tau: f64,
    },
    /// `d^u = lambda omega + cubic omega^3`.
    CubicDamping {
        lambda: f64,
        cubic: f64,
    },
    Custom(CustomBlock),
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

impl DeviceModel {
    pub fn dim(&self) -> usize {
        match self {
            DeviceModel::StaticOslc(_)
            | DeviceModel::LinearDamping { .. }
            | DeviceModel::CubicDamping { .. } => 0,
            DeviceModel::FirstOrder { .. }
            | DeviceModel::LagOslc { .. }
            | DeviceModel::LagDamping { .. } => 1,
            DeviceModel::SecondOrderTurbine(_) => 2,
            DeviceModel::FifthOrderTurbine(_) => 3,
            DeviceModel::Custom(c) => c.dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DeviceModel::StaticOslc(_) => "static_oslc",
            DeviceModel::FirstOrder { .. } => "first_order",
            DeviceModel::LagOslc { .. } => "lag_oslc",
            DeviceModel::SecondOrderTurbine(_) => "second_order_turbine",
            DeviceModel::FifthOrderTurbine(_) => "fifth_order_turbine",
            DeviceModel::LinearDamping { .. } => "linear",
            DeviceModel::LagDamping { .. } => "lag",
            DeviceModel::CubicDamping { .. } => "cubic",
            DeviceModel::Custom(_) => "custom",
        }
    }

    fn is_damping(&self) -> bool {
        matches!(
            self,
            DeviceModel::LinearDamping { .. }
                | DeviceModel::LagDamping { .. }
                | DeviceModel::CubicDamping { .. }
        )
    }

    fn validate(&self) -> Result<()> {
        match self {
            DeviceModel::StaticOslc(map) => map.cost.check_invertible().and(map.signal.validate()),
            DeviceModel::FirstOrder {
                mu, cost, signal, ..
            } => {
                positive("mu", *mu)?;
                signal.validate()?;
                cost.check_invertible()
            }
            DeviceModel::LagOslc { tau, map } => {
                positive("tau", *tau)?;
                map.signal.validate()?;
                map.cost.check_invertible()
            }
            DeviceModel::SecondOrderTurbine(p) => p.validate(),
            DeviceModel::FifthOrderTurbine(p) => p.validate(),
            DeviceModel::LinearDamping { lambda } => positive("lambda", *lambda),
            DeviceModel::LagDamping { lambda, tau } => {
                positive("lambda", *lambda)?;
                positive("tau", *tau)
            }
            DeviceModel::CubicDamping { lambda, cubic } => {
                positive("lambda", *lambda)?;
                if *cubic < 0.0 || !cubic.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "cubic damping coefficient must be nonnegative, got {cubic}"
                    )));
                }
                Ok(())
            }
            DeviceModel::Custom(c) => {
                if let Some(cost) = &c.cost {
                    cost.check_invertible()?;
                }
                Ok(())
            }
        }
    }

    fn deriv(&self, x: &[f64], z: Zeta, dx: &mut [f64]) {
        match self {
            DeviceModel::StaticOslc(_)
            | DeviceModel::LinearDamping { .. }
            | DeviceModel::CubicDamping { .. } => {}
            DeviceModel::FirstOrder {
                mu,
                cost,
                sign,
                signal,
            } => {
                dx[0] = -mu * (cost.marginal(x[0]) - sign * signal.eval(z));
            }
            DeviceModel::LagOslc { tau, map } => dx[0] = (map.eval(z) - x[0]) / tau,
            DeviceModel::SecondOrderTurbine(p) => p.deriv(x, z, dx),
            DeviceModel::FifthOrderTurbine(p) => p.deriv(x, z, dx),
            DeviceModel::LagDamping { lambda, tau } => dx[0] = (lambda * z.omega() - x[0]) / tau,
            DeviceModel::Custom(c) => (c.derivative)(x, z, dx),
        }
    }

    fn output(&self, x: &[f64], z: Zeta) -> f64 {
        match self {
            DeviceModel::StaticOslc(map) => map.eval(z),
            DeviceModel::FirstOrder { .. }
            | DeviceModel::LagOslc { .. }
            | DeviceModel::LagDamping { .. } => x[0],
            DeviceModel::SecondOrderTurbine(p) => p.output(x, z),
            DeviceModel::FifthOrderTurbine(p) => p.output(x, z),
            DeviceModel::LinearDamping { lambda } => lambda * z.omega(),
            DeviceModel::CubicDamping { lambda, cubic } => {
                let w = z.omega();
                lambda * w + cubic * w * w * w
            }
            DeviceModel::Custom(c) => (c.output)(x, z),
        }
    }

    fn omega_slope(&self, x: &[f64], z: Zeta) -> f64 {
        match self {
            DeviceModel::StaticOslc(map) => map.omega_slope(z),
            DeviceModel::LinearDamping { lambda } => *lambda,
            DeviceModel::CubicDamping { lambda, cubic } => {
                let w = z.omega();
                lambda + 3.0 * cubic * w * w
            }
            DeviceModel::Custom(c) => {
                let h = 1e-7 * (1.0 + z.neg_omega.abs());
                let up = (c.output)(x, Zeta::new(z.neg_omega - h, z.pc));
                let dn = (c.output)(x, Zeta::new(z.neg_omega + h, z.pc));
                (up - dn) / (2.0 * h)
            }
            _ => 0.0,
        }
    }

    fn equilibrium(&self, z: Zeta) -> Result<(Vec<f64>, f64)> {
        let closed = match self {
            DeviceModel::StaticOslc(map) => (vec![], map.eval(z)),
            DeviceModel::FirstOrder {
                cost, sign, signal, ..
            } => {
                let x = cost.inverse_marginal(sign * signal.eval(z));
                (vec![x], x)
            }
            DeviceModel::LagOslc { map, .. } => {
                let x = map.eval(z);
                (vec![x], x)
            }
            DeviceModel::SecondOrderTurbine(p) => p.equilibrium(z),
            DeviceModel::FifthOrderTurbine(p) => p.equilibrium(z),
            DeviceModel::LinearDamping { lambda } => (vec![], lambda * z.omega()),
            DeviceModel::LagDamping { lambda, .. } => {
                let x = lambda * z.omega();
                (vec![x], x)
            }
            DeviceModel::CubicDamping { .. } => (vec![], self.output(&[], z)),
            DeviceModel::Custom(c) => {
                let (x, _) = newton(
                    |x, out| (c.derivative)(x, z, out),
                    &vec![0.0; c.dim],
                    NewtonOptions::default(),
                    &format!("equilibrium of custom block '{}'", c.name),
                )?;
                let y = (c.output)(&x, z);
                (x, y)
            }
        };
        Ok(closed)
    }

    fn is_linear(&self) -> bool {
        match self {
            DeviceModel::StaticOslc(map) | DeviceModel::LagOslc { map, .. } => {
                matches!(map.cost, CostFunction::Quadratic { .. })
                    && map.bounds.min == f64::NEG_INFINITY
                    && map.bounds.max == f64::INFINITY
            }
            DeviceModel::FirstOrder { cost, .. } => matches!(cost, CostFunction::Quadratic { .. }),
            DeviceModel::SecondOrderTurbine(_)
            | DeviceModel::FifthOrderTurbine(_)
            | DeviceModel::LinearDamping { .. }
            | DeviceModel::LagDamping { .. } => true,
            DeviceModel::CubicDamping { cubic, .. } => *cubic == 0.0,
            DeviceModel::Custom(c) => c.linear,
        }
    }

    /// Analytic Jacobians `(A, B, C, D)` with respect to `(x, zeta)`.
    fn jacobian(&self, x: &[f64], z: Zeta) -> Option<LtiRealization> {
        let m = |r: usize, c: usize, v: &[f64]| DMatrix::from_row_slice(r, c, v);
        let lin = match self {
            DeviceModel::StaticOslc(map) => {
                LtiRealization::static_gain(m(1, 2, &[-map.omega_slope(z), map.pc_slope(z)]))
            }
            DeviceModel::FirstOrder {
                mu,
                cost,
                sign,
                signal,
            } => LtiRealization {
                a: m(1, 1, &[-mu * cost.curvature(x[0])]),
                b: m(
                    1,
                    2,
                    &[mu * sign * signal.omega_gain, mu * sign * signal.pc_gain],
                ),
                c: m(1, 1, &[1.0]),
                d: DMatrix::zeros(1, 2),
            },
            DeviceModel::LagOslc { tau, map } => LtiRealization {
                a: m(1, 1, &[-1.0 / tau]),
                b: m(1, 2, &[-map.omega_slope(z) / tau, map.pc_slope(z) / tau]),
                c: m(1, 1, &[1.0]),
                d: DMatrix::zeros(1, 2),
            },
            DeviceModel::SecondOrderTurbine(p) => p.realization(),
            DeviceModel::FifthOrderTurbine(p) => p.realization(),
            DeviceModel::LinearDamping { lambda } => {
                LtiRealization::static_gain(m(1, 2, &[-lambda, 0.0]))
            }
            DeviceModel::LagDamping { lambda, tau } => LtiRealization {
                a: m(1, 1, &[-1.0 / tau]),
                b: m(1, 2, &[-lambda / tau, 0.0]),
                c: m(1, 1, &[1.0]),
                d: DMatrix::zeros(1, 2),
            },
            DeviceModel::CubicDamping { .. } => {
                LtiRealization::static_gain(m(1, 2, &[-self.omega_slope(x, z), 0.0]))
            }
            DeviceModel::Custom(_) => return None,
        };
        Some(lin)
    }

    /// Cost and bounds defining the steady-state map, for dispatch.
    pub fn dispatch_cost(&self) -> Option<(CostFunction, Bounds)> {
        match self {
            DeviceModel::StaticOslc(map) | DeviceModel::LagOslc { map, .. } => {
                Some((map.cost.clone(), map.bounds))
            }
            DeviceModel::FirstOrder { cost, .. } => Some((cost.clone(), Bounds::unbounded())),
            DeviceModel::SecondOrderTurbine(p) => Some((
                CostFunction::Quadratic {
                    coefficient: p.implied_cost_coefficient(),
                },
                Bounds::unbounded(),
            )),
            DeviceModel::FifthOrderTurbine(p) => Some((
                CostFunction::Quadratic {
                    coefficient: p.implied_cost_coefficient(),
                },
                Bounds::unbounded(),
            )),
            DeviceModel::Custom(c) => c.cost.clone().map(|cost| (cost, c.bounds)),
            _ => None,
        }
    }
}

/// A device with its role and optional power-command pre-filter.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBlock {
    pub role: Role,
    pub model: DeviceModel,
    pub prefilter: Option<LeadLag>,
}

impl DeviceBlock {
    pub fn new(role: Role, model: DeviceModel) -> Result<Self> {
        model.validate()?;
        let damping = model.is_damping();
        match (role, damping, &model) {
            (_, _, DeviceModel::Custom(_)) => {}
            (Role::Damping, false, _) => {
                return Err(Error::InvalidParameter(format!(
                    "'{}' cannot be used as a damping block",
                    model.kind_name()
                )))
            }
            (Role::Supply | Role::Demand, true, _) => {
                return Err(Error::InvalidParameter(format!(
                    "damping model '{}' cannot be used as a {role} block",
                    model.kind_name()
                )))
            }
            _ => {}
        }
        if role == Role::Demand
            && matches!(
                model,
                DeviceModel::SecondOrderTurbine(_) | DeviceModel::FifthOrderTurbine(_)
            )
        {
            return Err(Error::InvalidParameter(
                "turbine-governor models can only be supply blocks".into(),
            ));
        }
        let sign_ok = match &model {
            DeviceModel::StaticOslc(map) | DeviceModel::LagOslc { map, .. } => {
                map.sign == role.oslc_sign()
            }
            DeviceModel::FirstOrder { sign, .. } => *sign == role.oslc_sign(),
            _ => true,
        };
        if !sign_ok {
            return Err(Error::InvalidParameter(format!(
                "steady-state map sign does not match the {role} role"
            )));
        }
        Ok(DeviceBlock {
            role,
            model,
            prefilter: None,
        })
    }

    pub fn with_prefilter(mut self, filter: LeadLag) -> Result<Self> {
        filter.validate()?;
        if self.role == Role::Damping {
            return Err(Error::InvalidParameter(
                "damping blocks do not see the power command".into(),
            ));
        }
        self.prefilter = Some(filter);
        Ok(self)
    }

    /// Static OSLC block from a cost, bounds and price signal.
    pub fn static_oslc(
        role: Role,
        cost: CostFunction,
        bounds: Bounds,
        signal: PriceSignal,
    ) -> Result<Self> {
        let map = StaticMap {
            cost,
            bounds,
            sign: role.oslc_sign(),
            signal,
        };
        DeviceBlock::new(role, DeviceModel::StaticOslc(map))
    }

    pub fn first_order(
        role: Role,
        mu: f64,
        cost: CostFunction,
        signal: PriceSignal,
    ) -> Result<Self> {
        DeviceBlock::new(
            role,
            DeviceModel::FirstOrder {
                mu,
                cost,
                sign: role.oslc_sign(),
                signal,
            },
        )
    }

    pub fn lag_oslc(
        role: Role,
        tau: f64,
        cost: CostFunction,
        bounds: Bounds,
        signal: PriceSignal,
    ) -> Result<Self> {
        let map = StaticMap {
            cost,
            bounds,
            sign: role.oslc_sign(),
            signal,
        };
        DeviceBlock::new(role, DeviceModel::LagOslc { tau, map })
    }

    pub fn linear_damping(lambda: f64) -> Result<Self> {
        DeviceBlock::new(Role::Damping, DeviceModel::LinearDamping { lambda })
    }

    pub fn state_dim(&self) -> usize {
        self.model.dim() + usize::from(self.prefilter.is_some())
    }

    /// Splits the state into the filter part and the model part and
    /// returns the input the model sees.
    fn split<'a>(&self, x: &'a [f64], z: Zeta) -> (Zeta, &'a [f64]) {
        match &self.prefilter {
            Some(f) => {
                let r = f.ratio();
                let pcf = r * z.pc + (1.0 - r) * x[0];
                (Zeta::new(z.neg_omega, pcf), &x[1..])
            }
            None => (z, x),
        }
    }

    /// Writes `dx` and returns the output. No dimension checks.
    pub fn eval_into(&self, x: &[f64], z: Zeta, dx: &mut [f64]) -> f64 {
        let (zi, xm) = self.split(x, z);
        match &self.prefilter {
            Some(f) => {
                dx[0] = (z.pc - x[0]) / f.t_lag;
                self.model.deriv(xm, zi, &mut dx[1..]);
            }
            None => self.model.deriv(xm, zi, dx),
        }
        self.model.output(xm, zi)
    }

    pub fn output(&self, x: &[f64], z: Zeta) -> f64 {
        let (zi, xm) = self.split(x, z);
        self.model.output(xm, zi)
    }

    /// Instantaneous sensitivity of the output to `omega` with the state
    /// held fixed.
    pub fn omega_slope(&self, x: &[f64], z: Zeta) -> f64 {
        let (zi, xm) = self.split(x, z);
        self.model.omega_slope(xm, zi)
    }

    pub fn equilibrium(&self, z: Zeta) -> Result<(Vec<f64>, f64)> {
        let (xm, y) = self.model.equilibrium(z)?;
        let x = match self.prefilter {
            Some(_) => std::iter::once(z.pc).chain(xm).collect(),
            None => xm,
        };
        Ok((x, y))
    }

    pub fn is_linear(&self) -> bool {
        self.model.is_linear()
    }

    pub fn is_memoryless(&self) -> bool {
        self.state_dim() == 0
    }

    /// Single-output realization of the linearization at `(x, z)`,
    /// input ordering `zeta`.
    pub fn linearize(&self, x: &[f64], z: Zeta, h: f64) -> Result<LtiRealization> {
        self.check_dim(x)?;
        let analytic = if self.is_linear() {
            let (zi, xm) = self.split(x, z);
            self.model.jacobian(xm, zi)
        } else {
            None
        };
        let lin = match analytic {
            Some(inner) => match &self.prefilter {
                Some(f) => compose_prefilter(&inner, f),
                None => inner,
            },
            None => self.fd_linearize(x, z, h),
        };
        LtiRealization::new(lin.a, lin.b, lin.c, lin.d)
    }

    fn fd_linearize(&self, x: &[f64], z: Zeta, h: f64) -> LtiRealization {
        let n = self.state_dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 2);
        let mut c = DMatrix::zeros(1, n);
        let mut d = DMatrix::zeros(1, 2);
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut xp = x.to_vec();
        for j in 0..n {
            let step = h * (1.0 + x[j].abs());
            xp[j] = x[j] + step;
            let yp = self.eval_into(&xp, z, &mut fp);
            xp[j] = x[j] - step;
            let ym = self.eval_into(&xp, z, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
            }
            c[(0, j)] = (yp - ym) / (2.0 * step);
        }
        for k in 0..2 {
            let base = if k == 0 { z.neg_omega } else { z.pc };
            let step = h * (1.0 + base.abs());
            let bump = |s: f64| {
                if k == 0 {
                    Zeta::new(z.neg_omega + s, z.pc)
                } else {
                    Zeta::new(z.neg_omega, z.pc + s)
                }
            };
            let yp = self.eval_into(x, bump(step), &mut fp);
            let ym = self.eval_into(x, bump(-step), &mut fm);
            for i in 0..n {
                b[(i, k)] = (fp[i] - fm[i]) / (2.0 * step);
            }
            d[(0, k)] = (yp - ym) / (2.0 * step);
        }
        LtiRealization { a, b, c, d }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "device state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Marginal cost seen at output `y`, signed so that every participant
    /// reports the common price at the optimum.
    pub fn reported_marginal_cost(&self, y: f64) -> Option<f64> {
        let (cost, _) = self.model.dispatch_cost()?;
        Some(match self.role {
            Role::Demand => -cost.marginal(y),
            _ => cost.marginal(y),
        })
    }

    /// Storage for a nonlinear custom block, if declared.
    pub fn declared_storage(&self) -> Option<Arc<StorageFn>> {
        match &self.model {
            DeviceModel::Custom(c) if self.prefilter.is_none() => c.storage.clone(),
            _ => None,
        }
    }
}

/// Series connection of a lead/lag pre-filter on the `p^c` channel with
/// the model realization (filter state first).
fn compose_prefilter(inner: &LtiRealization, f: &LeadLag) -> LtiRealization {
    let n = inner.states();
    let r = f.ratio();
    let tl = f.t_lag;
    let mut a = DMatrix::zeros(n + 1, n + 1);
    let mut b = DMatrix::zeros(n + 1, 2);
    let mut c = DMatrix::zeros(1, n + 1);
    let mut d = DMatrix::zeros(1, 2);
    a[(0, 0)] = -1.0 / tl;
    b[(0, 1)] = 1.0 / tl;
    for i in 0..n {
        a[(i + 1, 0)] = inner.b[(i, 1)] * (1.0 - r);
        for j in 0..n {
            a[(i + 1, j + 1)] = inner.a[(i, j)];
        }
        b[(i + 1, 0)] = inner.b[(i, 0)];
        b[(i + 1, 1)] = inner.b[(i, 1)] * r;
        c[(0, i + 1)] = inner.c[(0, i)];
    }
    c[(0, 0)] = inner.d[(0, 1)] * (1.0 - r);
    d[(0, 0)] = inner.d[(0, 0)];
    d[(0, 1)] = inner.d[(0, 1)] * r;
    LtiRealization { a, b, c, d }
}

/// State derivative and output of a block.
pub fn device_eval(block: &DeviceBlock, x: &[f64], zeta: Zeta) -> Result<(Vec<f64>, f64)> {
    block.check_dim(x)?;
    let mut dx = vec![0.0; block.state_dim()];
    let y = block.eval_into(x, zeta, &mut dx);
    if !y.is_finite() || dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} block '{}' produced a non-finite value",
            block.role,
            block.model.kind_name()
        )));
    }
    Ok((dx, y))
}

/// Equilibrium state and output for a constant input.
pub fn device_equilibrium(block: &DeviceBlock, zeta: Zeta) -> Result<(Vec<f64>, f64)> {
    let (x, y) = block.equilibrium(zeta)?;
    let (dx, _) = device_eval(block, &x, zeta)?;
    let res = dx.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if res > 1e-8 {
        return Err(Error::NewtonFailed {
            context: format!("{} block equilibrium", block.model.kind_name()),
            residual: res,
            iterations: 0,
        });
    }
    Ok((x, y))
}

/// Linearization of a block around `(x, zeta)`.
pub fn linearize(block: &DeviceBlock, x: &[f64], zeta: Zeta, h: f64) -> Result<LtiRealization> {
    block.linearize(x, zeta, h)
}

/// Devices attached to one bus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BusDevices {
    pub supply: Option<DeviceBlock>,
    pub demand: Option<DeviceBlock>,
    pub damping: Option<DeviceBlock>,
}

/// Outputs of the devices on one bus.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BusOutputs {
    pub p_m: f64,
    pub d_c: f64,
    pub d_u: f64,
}

impl BusOutputs {
    pub fn net_supply(&self) -> f64 {
        self.p_m - self.d_c
    }
}

impl BusDevices {
    pub fn blocks(&self) -> impl Iterator<Item = &DeviceBlock> {
        [&self.supply, &self.demand, &self.damping]
            .into_iter()
            .filter_map(|b| b.as_ref())
    }

    pub fn state_dim(&self) -> usize {
        self.blocks().map(|b| b.state_dim()).sum()
    }

    fn dims(&self) -> [usize; 3] {
        let d = |b: &Option<DeviceBlock>| b.as_ref().map_or(0, |b| b.state_dim());
        [d(&self.supply), d(&self.demand), d(&self.damping)]
    }

    /// Per-block state slices of the bus state vector.
    pub fn split_state<'a>(&self, x: &'a [f64]) -> [&'a [f64]; 3] {
        let [a, b, _] = self.dims();
        [&x[..a], &x[a..a + b], &x[a + b..]]
    }

    pub fn outputs(&self, x: &[f64], z: Zeta) -> BusOutputs {
        let [xs, xd, xu] = self.split_state(x);
        BusOutputs {
            p_m: self.supply.as_ref().map_or(0.0, |b| b.output(xs, z)),
            d_c: self.demand.as_ref().map_or(0.0, |b| b.output(xd, z)),
            d_u: self.damping.as_ref().map_or(0.0, |b| b.output(xu, z)),
        }
    }

    /// Writes the bus state derivative and returns the outputs.
    pub fn eval_into(&self, x: &[f64], z: Zeta, dx: &mut [f64]) -> BusOutputs {
        let [a, b, _] = self.dims();
        let (dxs, rest) = dx.split_at_mut(a);
        let (dxd, dxu) = rest.split_at_mut(b);
        let [xs, xd, xu] = self.split_state(x);
        BusOutputs {
            p_m: self
                .supply
                .as_ref()
                .map_or(0.0, |blk| blk.eval_into(xs, z, dxs)),
            d_c: self
                .demand
                .as_ref()
                .map_or(0.0, |blk| blk.eval_into(xd, z, dxd)),
            d_u: self
                .damping
                .as_ref()
                .map_or(0.0, |blk| blk.eval_into(xu, z, dxu)),
        }
    }

    /// `d(s - d^u)/d omega` with states held fixed.
    pub fn balance_omega_slope(&self, x: &[f64], z: Zeta) -> f64 {
        let [xs, xd, xu] = self.split_state(x);
        self.supply.as_ref().map_or(0.0, |b| b.omega_slope(xs, z))
            - self.demand.as_ref().map_or(0.0, |b| b.omega_slope(xd, z))
            - self.damping.as_ref().map_or(0.0, |b| b.omega_slope(xu, z))
    }

    pub fn equilibrium(&self, z: Zeta) -> Result<(Vec<f64>, BusOutputs)> {
        let mut x = Vec::with_capacity(self.state_dim());
        let mut out = BusOutputs::default();
        if let Some(b) = &self.supply {
            let (xs, y) = b.equilibrium(z)?;
            x.extend(xs);
            out.p_m = y;
        }
        if let Some(b) = &self.demand {
            let (xs, y) = b.equilibrium(z)?;
            x.extend(xs);
            out.d_c = y;
        }
        if let Some(b) = &self.damping {
            let (xs, y) = b.equilibrium(z)?;
            x.extend(xs);
            out.d_u = y;
        }
        Ok((x, out))
    }

    /// Two-output realization of the bus map `zeta -> [s, -d^u]`.
    pub fn realization(&self, x: &[f64], z: Zeta, h: f64) -> Result<LtiRealization> {
        let [xs, xd, xu] = self.split_state(x);
        let mut parts = Vec::new();
        let weight = |a: f64, b: f64| DMatrix::from_column_slice(2, 1, &[a, b]);
        if let Some(b) = &self.supply {
            parts.push((b.linearize(xs, z, h)?, weight(1.0, 0.0)));
        }
        if let Some(b) = &self.demand {
            parts.push((b.linearize(xd, z, h)?, weight(-1.0, 0.0)));
        }
        if let Some(b) = &self.damping {
            parts.push((b.linearize(xu, z, h)?, weight(0.0, -1.0)));
        }
        Ok(LtiRealization::combine(&parts, 2, 2))
    }

    /// The damping block's static gain `d d^u / d omega` at `omega`.
    pub fn damping_static_gain(&self, omega: f64) -> f64 {
        match &self.damping {
            None => 0.0,
            Some(b) => {
                let z = Zeta::from_omega(omega, 0.0);
                match b.equilibrium(z) {
                    Ok((x, _)) => b.omega_slope(&x, z),
                    Err(_) => 0.0,
                }
            }
        }
    }
}

/// Sampled check that a damping block provides negative feedback from
/// frequency: `omega * k(omega) > 0` on `[-1, 1] \ {0}`.
pub fn damping_is_feedback(block: &DeviceBlock) -> bool {
    (1..=200).all(|k| {
        let w = k as f64 / 200.0;
        [w, -w].into_iter().all(|omega| {
            block
                .equilibrium(Zeta::from_omega(omega, 0.0))
                .map(|(_, y)| omega * y > 0.0)
                .unwrap_or(false)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(k: f64) -> CostFunction {
        CostFunction::quadratic(k).unwrap()
    }

    fn turbine(k: f64, lpc: f64) -> DeviceBlock {
        DeviceBlock::new(
            Role::Supply,
            DeviceModel::SecondOrderTurbine(SecondOrderTurbineParams {
                k,
                tau_a: 0.5,
                tau_b: 2.0,
                lambda_pc: lpc,
            }),
        )
        .unwrap()
    }

    #[test]
    fn first_order_eval() {
        let b =
            DeviceBlock::first_order(Role::Supply, 1.0, quad(1.0), PriceSignal::default()).unwrap();
        let (dx, y) = device_eval(&b, &[0.0], Zeta::new(-0.0, 2.0)).unwrap();
        assert_eq!(dx, vec![2.0]);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn second_order_at_origin() {
        let b = turbine(1.0, 0.5);
        let (dx, y) = device_eval(&b, &[0.0, 0.0], Zeta::default()).unwrap();
        assert_eq!(dx, vec![0.0, 0.0]);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn linear_damping_output() {
        let b = DeviceBlock::linear_damping(2.0).unwrap();
        let (dx, y) = device_eval(&b, &[], Zeta::from_omega(0.5, 0.0)).unwrap();
        assert!(dx.is_empty());
        assert_eq!(y, 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let b = turbine(1.0, 0.5);
        assert!(matches!(
            device_eval(&b, &[0.0], Zeta::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn turbine_equilibrium_output() {
        let bus = BusDevices {
            supply: Some(turbine(1.0, 0.5)),
            demand: None,
            damping: Some(DeviceBlock::linear_damping(1.0).unwrap()),
        };
        let z = Zeta::from_omega(0.0, 1.0);
        let (x, out) = bus.equilibrium(z).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        assert!((out.net_supply() - out.d_u - 1.5).abs() < 1e-15);
    }

    #[test]
    fn static_supply_equilibrium() {
        let b = DeviceBlock::static_oslc(
            Role::Supply,
            quad(1.0),
            Bounds::new(-10.0, 10.0).unwrap(),
            PriceSignal::default(),
        )
        .unwrap();
        let (x, y) = device_equilibrium(&b, Zeta::new(0.0, 2.0)).unwrap();
        assert!(x.is_empty());
        assert_eq!(y, 2.0);
    }

    #[test]
    fn first_order_linearization() {
        let b =
            DeviceBlock::first_order(Role::Supply, 1.0, quad(1.0), PriceSignal::default()).unwrap();
        let lin = b.linearize(&[0.0], Zeta::default(), 1e-6).unwrap();
        assert_eq!(lin.a[(0, 0)], -1.0);
        // x' = -x + (p^c - omega): unit gain on both zeta entries
        assert_eq!((lin.b[(0, 0)], lin.b[(0, 1)]), (1.0, 1.0));
        assert_eq!(lin.c[(0, 0)], 1.0);
        assert_eq!((lin.d[(0, 0)], lin.d[(0, 1)]), (0.0, 0.0));
        let fd = b.fd_linearize(&[0.0], Zeta::default(), 1e-6);
        assert!((fd.a[(0, 0)] + 1.0).abs() < 1e-8);
        assert!((fd.b[(0, 0)] - 1.0).abs() < 1e-8 && (fd.b[(0, 1)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn static_supply_linearization() {
        let b = DeviceBlock::static_oslc(
            Role::Supply,
            quad(1.0),
            Bounds::unbounded(),
            PriceSignal::default(),
        )
        .unwrap();
        let lin = b.linearize(&[], Zeta::default(), 1e-6).unwrap();
        assert_eq!(lin.states(), 0);
        assert_eq!((lin.d[(0, 0)], lin.d[(0, 1)]), (1.0, 1.0));
    }

    #[test]
    fn prefilter_composition_matches_fd() {
        let b = turbine(2.0, 0.7)
            .with_prefilter(LeadLag {
                t_lead: 0.3,
                t_lag: 1.2,
            })
            .unwrap();
        let z = Zeta::new(0.1, 0.4);
        let (x, _) = b.equilibrium(z).unwrap();
        let exact = b.linearize(&x, z, 1e-6).unwrap();
        let fd = b.fd_linearize(&x, z, 1e-6);
        for (e, f) in [
            (&exact.a, &fd.a),
            (&exact.b, &fd.b),
            (&exact.c, &fd.c),
            (&exact.d, &fd.d),
        ] {
            assert!((e - f).amax() < 1e-7, "{e} vs {f}");
        }
    }

    #[test]
    fn saturation_and_feedback() {
        let b = DeviceBlock::static_oslc(
            Role::Supply,
            quad(1.0),
            Bounds::new(-0.5, 0.5).unwrap(),
            PriceSignal::default(),
        )
        .unwrap();
        assert_eq!(b.output(&[], Zeta::new(0.0, 3.0)), 0.5);
        assert_eq!(b.output(&[], Zeta::new(0.0, -3.0)), -0.5);
        assert_eq!(b.omega_slope(&[], Zeta::new(0.0, 3.0)), 0.0);
        assert!(damping_is_feedback(
            &DeviceBlock::linear_damping(0.3).unwrap()
        ));
        let lag = DeviceBlock::new(
            Role::Damping,
            DeviceModel::LagDamping {
                lambda: 1.0,
                tau: 0.2,
            },
        )
        .unwrap();
        assert!(damping_is_feedback(&lag));
    }

    #[test]
    fn role_mismatch_rejected() {
        assert!(DeviceBlock::new(
            Role::Damping,
            DeviceModel::SecondOrderTurbine(SecondOrderTurbineParams {
                k: 1.0,
                tau_a: 1.0,
                tau_b: 1.0,
                lambda_pc: 1.0
            })
        )
        .is_err());
        assert!(
            DeviceBlock::new(Role::Supply, DeviceModel::LinearDamping { lambda: 1.0 }).is_err()
        );
        assert!(DeviceBlock::linear_damping(0.0).is_err());
    }

    #[test]
    fn custom_block_equilibrium_by_newton() {
        let custom = CustomBlock {
            name: "cubic-lag".into(),
            dim: 1,
            derivative: Arc::new(|x, z, dx| dx[0] = -(x[0] + x[0].powi(3)) + z.pc + z.neg_omega),
            output: Arc::new(|x, _| x[0]),
            cost: None,
            bounds: Bounds::unbounded(),
            storage: None,
            linear: false,
        };
        let b = DeviceBlock::new(Role::Supply, DeviceModel::Custom(custom)).unwrap();
        let (x, y) = device_equilibrium(&b, Zeta::new(0.0, 2.0)).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert_eq!(x[0], y);
        let lin = b.linearize(&x, Zeta::new(0.0, 2.0), 1e-6).unwrap();
        assert!((lin.a[(0, 0)] + 4.0).abs() < 1e-6);
    }
}
