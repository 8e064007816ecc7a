//! Optimal supply and load control (OSLC) dispatch.
//!
//! The dispatch problem minimises separable strictly convex generation and
//! demand-disutility costs subject to a single power-balance constraint and
//! box constraints. Because the only coupling is the balance, the optimum is
//! characterised by one scalar price: every unsaturated participant runs at
//! the point where its marginal cost equals the price. [`solve_oslc`] finds
//! that price by bisection on the (nondecreasing) surplus function and then
//! rebuilds the box multipliers from it.
//!
//! The same inverse-marginal-cost maps, clipped to the boxes, are the static
//! input/output maps the decentralised controllers must realise at steady
//! state; [`synthesize_controller_maps`] produces them.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::device::Zeta;
use crate::error::{Error, Result};

/// Saturation box `[min, max]`. Infinite ends mean "unbounded".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::unbounded()
    }
}

impl Bounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if min.is_nan() || max.is_nan() || min > max {
            return Err(Error::InvalidParameter(format!(
                "bounds require min <= max, got [{min}, {max}]"
            )));
        }
        Ok(Bounds { min, max })
    }

    pub const fn unbounded() -> Self {
        Bounds {
            min: f64::NEG_INFINITY,
            max: f64::INFINITY,
        }
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.max(self.min).min(self.max)
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.min - tol && v <= self.max + tol
    }

    /// Amount by which `v` lies outside the box (0 inside).
    pub fn violation(&self, v: f64) -> f64 {
        (self.min - v).max(v - self.max).max(0.0)
    }

    pub fn is_bounded(&self) -> bool {
        self.min.is_finite() && self.max.is_finite()
    }
}

/// User-supplied cost: value, derivative and derivative inverse.
#[derive(Clone)]
pub struct CustomCost {
    pub name: String,
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub marginal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub inverse_marginal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCost")
            .field("name", &self.name)
            .finish()
    }
}

/// A strictly convex, continuously differentiable cost.
#[derive(Debug, Clone)]
pub enum CostFunction {
    /// `C(p) = coefficient * p^2 / 2`.
    Quadratic {
        coefficient: f64,
    },
    Custom(CustomCost),
}

impl PartialEq for CostFunction {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                CostFunction::Quadratic { coefficient: a },
                CostFunction::Quadratic { coefficient: b },
            ) => a == b,
            (CostFunction::Custom(a), CostFunction::Custom(b)) => {
                Arc::ptr_eq(&a.marginal, &b.marginal)
            }
            _ => false,
        }
    }
}

impl CostFunction {
    pub fn quadratic(coefficient: f64) -> Result<Self> {
        if !(coefficient > 0.0 && coefficient.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "quadratic cost coefficient must be positive and finite, got {coefficient}"
            )));
        }
        Ok(CostFunction::Quadratic { coefficient })
    }

    pub fn value(&self, p: f64) -> f64 {
        match self {
            CostFunction::Quadratic { coefficient } => 0.5 * coefficient * p * p,
            CostFunction::Custom(c) => (c.value)(p),
        }
    }

    pub fn marginal(&self, p: f64) -> f64 {
        match self {
            CostFunction::Quadratic { coefficient } => coefficient * p,
            CostFunction::Custom(c) => (c.marginal)(p),
        }
    }

    pub fn inverse_marginal(&self, price: f64) -> f64 {
        match self {
            CostFunction::Quadratic { coefficient } => price / coefficient,
            CostFunction::Custom(c) => (c.inverse_marginal)(price),
        }
    }

    /// Second derivative `C''(p)`.
    pub fn curvature(&self, p: f64) -> f64 {
        match self {
            CostFunction::Quadratic { coefficient } => *coefficient,
            CostFunction::Custom(c) => {
                let h = 1e-6 * (1.0 + p.abs());
                ((c.marginal)(p + h) - (c.marginal)(p - h)) / (2.0 * h)
            }
        }
    }

    /// Slope of the inverse marginal cost at `price`.
    pub fn inverse_marginal_slope(&self, price: f64) -> f64 {
        match self {
            CostFunction::Quadratic { coefficient } => 1.0 / coefficient,
            CostFunction::Custom(c) => {
                let h = 1e-6 * (1.0 + price.abs());
                ((c.inverse_marginal)(price + h) - (c.inverse_marginal)(price - h)) / (2.0 * h)
            }
        }
    }

    /// Sampled check that `C'` is strictly increasing and that the declared
    /// inverse actually inverts it.
    pub fn check_invertible(&self) -> Result<()> {
        let c = match self {
            CostFunction::Quadratic { coefficient } => {
                return if *coefficient > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(
                        "quadratic coefficient must be positive".into(),
                    ))
                };
            }
            CostFunction::Custom(c) => c,
        };
        let samples: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.05).collect();
        let mut prev = f64::NEG_INFINITY;
        for &p in &samples {
            let m = (c.marginal)(p);
            if !m.is_finite() || m <= prev {
                return Err(Error::InvalidParameter(format!(
                    "cost '{}' has a marginal cost that is not strictly increasing near p = {p}",
                    c.name
                )));
            }
            prev = m;
            let back = (c.inverse_marginal)(m);
            if (back - p).abs() > 1e-6 * (1.0 + p.abs()) {
                return Err(Error::InvalidParameter(format!(
                    "cost '{}': inverse marginal does not invert the marginal at p = {p} (got {back})",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// Multiplies the cost by a positive constant.
    pub fn scaled(&self, factor: f64) -> CostFunction {
        match self {
            CostFunction::Quadratic { coefficient } => CostFunction::Quadratic {
                coefficient: coefficient * factor,
            },
            CostFunction::Custom(c) => {
                let (v, m, inv) = (
                    c.value.clone(),
                    c.marginal.clone(),
                    c.inverse_marginal.clone(),
                );
                CostFunction::Custom(CustomCost {
                    name: format!("{}*{}", factor, c.name),
                    value: Arc::new(move |p| factor * v(p)),
                    marginal: Arc::new(move |p| factor * m(p)),
                    inverse_marginal: Arc::new(move |q| inv(q / factor)),
                })
            }
        }
    }
}

/// Marginal cost `C'(value)`.
pub fn marginal_cost(cost: &CostFunction, value: f64) -> f64 {
    cost.marginal(value)
}

/// The scalar signal `f(zeta)` that drives the steady-state maps.
///
/// Must be surjective and strictly increasing in the power command; the
/// default is `p^c - omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PriceSignal {
    pub pc_gain: f64,
    pub omega_gain: f64,
}

impl Default for PriceSignal {
    fn default() -> Self {
        PriceSignal {
            pc_gain: 1.0,
            omega_gain: 1.0,
        }
    }
}

impl PriceSignal {
    pub fn eval(&self, zeta: Zeta) -> f64 {
        self.pc_gain * zeta.pc + self.omega_gain * zeta.neg_omega
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pc_gain > 0.0) || !self.omega_gain.is_finite() {
            return Err(Error::InvalidParameter(
                "price signal must be strictly increasing in p^c (pc_gain > 0)".into(),
            ));
        }
        Ok(())
    }
}

/// Steady-state map `clip((C')^{-1}(sign * f(zeta)))`.
///
/// `sign` is +1 for generation and -1 for controllable demand.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticMap {
    pub cost: CostFunction,
    pub bounds: Bounds,
    pub sign: f64,
    pub signal: PriceSignal,
}

impl StaticMap {
    pub fn supply(cost: CostFunction, bounds: Bounds, signal: PriceSignal) -> Self {
        StaticMap {
            cost,
            bounds,
            sign: 1.0,
            signal,
        }
    }

    pub fn demand(cost: CostFunction, bounds: Bounds, signal: PriceSignal) -> Self {
        StaticMap {
            cost,
            bounds,
            sign: -1.0,
            signal,
        }
    }

    /// The (signed) price seen by this participant.
    pub fn price(&self, zeta: Zeta) -> f64 {
        self.sign * self.signal.eval(zeta)
    }

    pub fn eval(&self, zeta: Zeta) -> f64 {
        self.bounds
            .clip(self.cost.inverse_marginal(self.price(zeta)))
    }

    /// Partial derivative of the map with respect to omega.
    pub fn omega_slope(&self, zeta: Zeta) -> f64 {
        let price = self.price(zeta);
        let raw = self.cost.inverse_marginal(price);
        if raw < self.bounds.min || raw > self.bounds.max {
            return 0.0;
        }
        // d price / d omega = -sign * omega_gain
        -self.sign * self.signal.omega_gain * self.cost.inverse_marginal_slope(price)
    }

    /// Partial derivative of the map with respect to the power command.
    pub fn pc_slope(&self, zeta: Zeta) -> f64 {
        let price = self.price(zeta);
        let raw = self.cost.inverse_marginal(price);
        if raw < self.bounds.min || raw > self.bounds.max {
            return 0.0;
        }
        self.sign * self.signal.pc_gain * self.cost.inverse_marginal_slope(price)
    }

    pub fn is_saturated(&self, zeta: Zeta, tol: f64) -> bool {
        let raw = self.cost.inverse_marginal(self.price(zeta));
        raw < self.bounds.min - tol || raw > self.bounds.max + tol
    }
}

/// Builds the generation and demand steady-state maps for a bus.
pub fn synthesize_controller_maps(
    supply_cost: &CostFunction,
    supply_bounds: Bounds,
    demand_cost: &CostFunction,
    demand_bounds: Bounds,
    signal: PriceSignal,
) -> Result<(StaticMap, StaticMap)> {
    supply_cost.check_invertible()?;
    demand_cost.check_invertible()?;
    signal.validate()?;
    Ok((
        StaticMap::supply(supply_cost.clone(), supply_bounds, signal),
        StaticMap::demand(demand_cost.clone(), demand_bounds, signal),
    ))
}

/// One generator or controllable load in the dispatch problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub bus: usize,
    pub cost: CostFunction,
    pub bounds: Bounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OslcProblem {
    pub generators: Vec<Participant>,
    pub demands: Vec<Participant>,
    /// Uncontrollable step load per bus.
    pub disturbance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OslcSolution {
    pub p_m: Vec<f64>,
    pub d_c: Vec<f64>,
    pub price: f64,
    pub lambda_plus: Vec<f64>,
    pub lambda_minus: Vec<f64>,
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
}

impl OslcProblem {
    pub fn total_disturbance(&self) -> f64 {
        self.disturbance.iter().sum()
    }

    pub fn generation_at(&self, price: f64) -> impl Iterator<Item = f64> + '_ {
        self.generators
            .iter()
            .map(move |g| g.bounds.clip(g.cost.inverse_marginal(price)))
    }

    pub fn demand_at(&self, price: f64) -> impl Iterator<Item = f64> + '_ {
        self.demands
            .iter()
            .map(move |d| d.bounds.clip(d.cost.inverse_marginal(-price)))
    }

    /// `sum p(price) - sum d(price) - sum p^L`; nondecreasing in the price.
    pub fn surplus(&self, price: f64) -> f64 {
        self.generation_at(price).sum::<f64>()
            - self.demand_at(price).sum::<f64>()
            - self.total_disturbance()
    }

    pub fn objective(&self, p_m: &[f64], d_c: &[f64]) -> f64 {
        self.generators
            .iter()
            .zip(p_m)
            .map(|(g, &p)| g.cost.value(p))
            .sum::<f64>()
            + self
                .demands
                .iter()
                .zip(d_c)
                .map(|(d, &v)| d.cost.value(v))
                .sum::<f64>()
    }

    fn check_feasible(&self) -> Result<()> {
        let total = self.total_disturbance();
        let lo: f64 = self.generators.iter().map(|g| g.bounds.min).sum::<f64>()
            - self.demands.iter().map(|d| d.bounds.max).sum::<f64>();
        let hi: f64 = self.generators.iter().map(|g| g.bounds.max).sum::<f64>()
            - self.demands.iter().map(|d| d.bounds.min).sum::<f64>();
        if self.generators.is_empty() && self.demands.is_empty() {
            if total == 0.0 {
                return Ok(());
            }
            return Err(Error::Infeasible(
                "no controllable participants but nonzero disturbance".into(),
            ));
        }
        if total < lo || total > hi {
            return Err(Error::Infeasible(format!(
                "total disturbance {total} outside achievable range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Box multipliers implied by a price, following the KKT construction
    /// (`lambda+ = (nu - C'(p_max)) 1{nu >= C'(p_max)}` and so on).
    pub fn multipliers_at(&self, price: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let gap = |x: f64| if x.is_finite() { x.max(0.0) } else { 0.0 };
        let lambda_plus = self
            .generators
            .iter()
            .map(|g| gap(price - g.cost.marginal(g.bounds.max)))
            .collect();
        let lambda_minus = self
            .generators
            .iter()
            .map(|g| gap(g.cost.marginal(g.bounds.min) - price))
            .collect();
        // beta_c,max = -C_d'(d_max), beta_c,min = -C_d'(d_min)
        let mu_plus = self
            .demands
            .iter()
            .map(|d| gap(-d.cost.marginal(d.bounds.max) - price))
            .collect();
        let mu_minus = self
            .demands
            .iter()
            .map(|d| gap(price + d.cost.marginal(d.bounds.min)))
            .collect();
        (lambda_plus, lambda_minus, mu_plus, mu_minus)
    }

    /// Candidate solution from given allocations and price, with multipliers
    /// rebuilt from the price.
    pub fn candidate(&self, p_m: Vec<f64>, d_c: Vec<f64>, price: f64) -> OslcSolution {
        let (lambda_plus, lambda_minus, mu_plus, mu_minus) = self.multipliers_at(price);
        OslcSolution {
            p_m,
            d_c,
            price,
            lambda_plus,
            lambda_minus,
            mu_plus,
            mu_minus,
        }
    }
}

const BRACKET_CAP: f64 = 1e9;

/// Solves the dispatch problem by bisection on the price.
pub fn solve_oslc(problem: &OslcProblem, tol: f64) -> Result<OslcSolution> {
    for p in problem.generators.iter().chain(&problem.demands) {
        p.cost.check_invertible()?;
        if p.bounds.min > p.bounds.max {
            return Err(Error::InvalidParameter(format!(
                "participant at bus {} has min > max",
                p.bus
            )));
        }
    }
    problem.check_feasible()?;

    let mut lo = -1.0;
    let mut hi = 1.0;
    while problem.surplus(lo) > 0.0 {
        lo *= 2.0;
        if lo < -BRACKET_CAP {
            return Err(Error::Infeasible(
                "surplus stays positive for all prices".into(),
            ));
        }
    }
    while problem.surplus(hi) < 0.0 {
        hi *= 2.0;
        if hi > BRACKET_CAP {
            return Err(Error::Infeasible(
                "surplus stays negative for all prices".into(),
            ));
        }
    }

    let tol = tol.max(f64::EPSILON);
    let mut price = 0.5 * (lo + hi);
    for _ in 0..400 {
        price = 0.5 * (lo + hi);
        let s = problem.surplus(price);
        if s == 0.0 {
            break;
        }
        if s > 0.0 {
            hi = price;
        } else {
            lo = price;
        }
        if hi - lo <= tol * 1e-3 * (1.0 + price.abs()) {
            price = 0.5 * (lo + hi);
            break;
        }
    }

    let p_m: Vec<f64> = problem.generation_at(price).collect();
    let d_c: Vec<f64> = problem.demand_at(price).collect();
    Ok(problem.candidate(p_m, d_c, price))
}

/// Per-condition residuals of the KKT system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub stationarity_generation: f64,
    pub stationarity_demand: f64,
    pub balance: f64,
    pub primal_bounds: f64,
    pub dual_feasibility: f64,
    pub complementary_slackness: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub violations: Vec<String>,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.stationarity_generation,
            self.stationarity_demand,
            self.balance,
            self.primal_bounds,
            self.dual_feasibility,
            self.complementary_slackness,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn slack_product(mult: f64, gap: f64) -> f64 {
    if mult == 0.0 {
        0.0
    } else if gap.is_finite() {
        (mult * gap).abs()
    } else {
        f64::INFINITY
    }
}

/// Checks a candidate against the KKT conditions of the dispatch problem.
pub fn verify_kkt(problem: &OslcProblem, candidate: &OslcSolution, tol: f64) -> KktReport {
    let ng = problem.generators.len();
    let nd = problem.demands.len();
    let mut violations = Vec::new();
    let dims_ok = candidate.p_m.len() == ng
        && candidate.lambda_plus.len() == ng
        && candidate.lambda_minus.len() == ng
        && candidate.d_c.len() == nd
        && candidate.mu_plus.len() == nd
        && candidate.mu_minus.len() == nd;
    if !dims_ok {
        return KktReport {
            stationarity_generation: f64::INFINITY,
            stationarity_demand: f64::INFINITY,
            balance: f64::INFINITY,
            primal_bounds: f64::INFINITY,
            dual_feasibility: f64::INFINITY,
            complementary_slackness: f64::INFINITY,
            tolerance: tol,
            passed: false,
            violations: vec!["candidate dimensions do not match the problem".into()],
        };
    }
    let nu = candidate.price;

    let mut stat_g: f64 = 0.0;
    let mut bounds_res: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (i, g) in problem.generators.iter().enumerate() {
        let p = candidate.p_m[i];
        let (lp, lm) = (candidate.lambda_plus[i], candidate.lambda_minus[i]);
        stat_g = stat_g.max((g.cost.marginal(p) - (nu - lp + lm)).abs());
        bounds_res = bounds_res.max(g.bounds.violation(p));
        dual = dual.max((-lp).max(0.0)).max((-lm).max(0.0));
        comp = comp
            .max(slack_product(lp, p - g.bounds.max))
            .max(slack_product(lm, p - g.bounds.min));
    }
    let mut stat_d: f64 = 0.0;
    for (i, d) in problem.demands.iter().enumerate() {
        let v = candidate.d_c[i];
        let (mp, mm) = (candidate.mu_plus[i], candidate.mu_minus[i]);
        stat_d = stat_d.max((d.cost.marginal(v) - (-nu - mp + mm)).abs());
        bounds_res = bounds_res.max(d.bounds.violation(v));
        dual = dual.max((-mp).max(0.0)).max((-mm).max(0.0));
        comp = comp
            .max(slack_product(mp, v - d.bounds.max))
            .max(slack_product(mm, v - d.bounds.min));
    }
    let balance = (candidate.p_m.iter().sum::<f64>()
        - candidate.d_c.iter().sum::<f64>()
        - problem.total_disturbance())
    .abs();

    let mut flag = |name: &str, value: f64| {
        if !(value <= tol) {
            violations.push(format!("{name} residual {value:.3e} exceeds {tol:.1e}"));
        }
    };
    flag("generation stationarity", stat_g);
    flag("demand stationarity", stat_d);
    flag("balance", balance);
    flag("primal bounds", bounds_res);
    flag("dual feasibility", dual);
    flag("complementary slackness", comp);

    KktReport {
        stationarity_generation: stat_g,
        stationarity_demand: stat_d,
        balance,
        primal_bounds: bounds_res,
        dual_feasibility: dual,
        complementary_slackness: comp,
        tolerance: tol,
        passed: violations.is_empty(),
        violations,
    }
}
