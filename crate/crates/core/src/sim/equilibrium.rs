//! Steady states of the closed loop and their optimality checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::certify::{bus_storage, BusAssembly, StorageOptions};
use crate::consensus::{equilibrium_balance_check, BalanceReport, EquilibriumSnapshot};
use crate::device::{DeviceBlock, DeviceModel, Role, Zeta};
use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::numerics::{newton, NewtonOptions};
use crate::oslc::{solve_oslc, verify_kkt, KktReport, OslcProblem, OslcSolution, Participant};

use super::system::{Derived, System};
use super::ControllerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumPath {
    Newton,
    /// Long-horizon integration until settled.
    Integration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecurityReport {
    pub max_abs_eta: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub kkt: KktReport,
    /// Allocations and price read off the equilibrium.
    pub candidate: OslcSolution,
    /// Independent dispatch solution.
    pub reference: OslcSolution,
    pub max_allocation_error: f64,
    pub price_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub state: Vec<f64>,
    pub p_l: Vec<f64>,
    pub derived: Derived,
    /// Common frequency (rad/s) and power command.
    pub omega: f64,
    pub pc: f64,
    pub path: EquilibriumPath,
    pub iterations: usize,
    /// Largest state derivative at the returned point.
    pub residual: f64,
    pub security: SecurityReport,
    pub optimality: Option<OptimalityReport>,
    pub balance: BalanceReport,
    pub notes: Vec<String>,
}

impl EquilibriumReport {
    pub fn passed(&self) -> bool {
        self.security.passed
            && self.balance.passed
            && self.optimality.as_ref().is_none_or(|o| o.passed)
    }
}

/// Price signal a dispatchable block responds to.
fn signal_price(block: &DeviceBlock, z: Zeta) -> Option<f64> {
    match &block.model {
        DeviceModel::StaticOslc(map) | DeviceModel::LagOslc { map, .. } => Some(map.signal.eval(z)),
        DeviceModel::FirstOrder { signal, .. } => Some(signal.eval(z)),
        DeviceModel::SecondOrderTurbine(_) | DeviceModel::FifthOrderTurbine(_) => {
            Some(z.pc + z.neg_omega)
        }
        _ => None,
    }
}

/// Dispatch problem implied by the network's devices, or the reason none
/// exists.
pub fn oslc_problem(
    network: &NetworkModel,
    p_l: &[f64],
) -> std::result::Result<OslcProblem, String> {
    let mut problem = OslcProblem {
        generators: Vec::new(),
        demands: Vec::new(),
        disturbance: p_l.to_vec(),
    };
    for (j, bus) in network.buses.iter().enumerate() {
        for block in [&bus.devices.supply, &bus.devices.demand]
            .into_iter()
            .flatten()
        {
            let Some((cost, bounds)) = block.model.dispatch_cost() else {
                return Err(format!(
                    "bus '{}': {} block has no dispatch cost",
                    bus.id,
                    block.model.kind_name()
                ));
            };
            let p = Participant {
                bus: j,
                cost,
                bounds,
            };
            match block.role {
                Role::Demand => problem.demands.push(p),
                _ => problem.generators.push(p),
            }
        }
    }
    if problem.generators.is_empty() && problem.demands.is_empty() {
        return Err("no dispatchable participants".into());
    }
    Ok(problem)
}

/// Solves `L y = r` for the weighted Laplacian `L = D W D^T` of a
/// connected graph, with `y` grounded at bus 0.
fn grounded_solve(
    n: usize,
    edges: &[(usize, usize)],
    weight: &[f64],
    r: &[f64],
) -> Result<Vec<f64>> {
    if n <= 1 {
        return Ok(vec![0.0; n]);
    }
    let mut lap = DMatrix::zeros(n, n);
    for (&(i, j), &w) in edges.iter().zip(weight) {
        lap[(i, i)] += w;
        lap[(j, j)] += w;
        lap[(i, j)] -= w;
        lap[(j, i)] -= w;
    }
    let red = lap.view((1, 1), (n - 1, n - 1)).into_owned();
    let rhs = DVector::from_iterator(n - 1, r[1..].iter().copied());
    let sol = red.lu().solve(&rhs).ok_or_else(|| {
        Error::NonFinite("grounded Laplacian is singular (graph disconnected?)".into())
    })?;
    let mut y = vec![0.0; n];
    y[1..].copy_from_slice(sol.as_slice());
    Ok(y)
}

/// Equilibrium with load `p_l`, reachable from `reference` (which fixes the
/// cycle components of the line angles and communication integrals).
pub fn find_equilibrium(
    system: &System<'_>,
    p_l: &[f64],
    reference: Option<&[f64]>,
    tol: f64,
) -> Result<EquilibriumReport> {
    let lay = &system.layout;
    let network = system.network();
    let n = lay.n_buses;
    let zero = vec![0.0; lay.len];
    let reference = reference.unwrap_or(&zero);
    let eta0 = lay.eta(reference);

    // initial price guess from the dispatch problem
    let pc_guess = oslc_problem(network, p_l)
        .ok()
        .and_then(|p| solve_oslc(&p, 1e-12).ok())
        .map_or(0.0, |s| s.price);

    let failure = std::cell::RefCell::new(None);
    let residual = |v: &[f64], out: &mut [f64]| {
        let (theta, rest) = v.split_at(n - 1);
        let (omega, pc) = (rest[0], rest[1]);
        let angle = |j: usize| if j == 0 { 0.0 } else { theta[j - 1] };
        let flows: Vec<f64> = network
            .lines
            .iter()
            .enumerate()
            .map(|(k, l)| crate::network::line_flow(eta0[k] + angle(l.from) - angle(l.to), l))
            .collect();
        let z = Zeta::from_omega(omega, pc);
        let mut total = 0.0;
        for (j, bus) in network.buses.iter().enumerate() {
            match bus.devices.equilibrium(z) {
                Ok((_, o)) => {
                    out[j] = -p_l[j] + o.net_supply() - o.d_u + system.lines.net_in(j, &flows);
                    total += o.net_supply() - p_l[j];
                }
                Err(e) => {
                    out[j] = f64::NAN;
                    *failure.borrow_mut() = Some(e);
                }
            }
        }
        out[n] = total;
    };
    let mut v0 = vec![0.0; n + 1];
    v0[n] = pc_guess;
    let opts = NewtonOptions {
        tol: 1e-13,
        max_iter: 200,
        ..Default::default()
    };
    let newton_result = newton(residual, &v0, opts, "network equilibrium");
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let mut notes = Vec::new();
    let (state, path, iterations) = match newton_result {
        Ok((v, iters)) => (
            assemble_state(system, p_l, reference, &v)?,
            EquilibriumPath::Newton,
            iters,
        ),
        Err(e) => {
            notes.push(format!("Newton failed ({e}); integrating to steady state"));
            let (s, steps) = settle(system, p_l, reference)?;
            (s, EquilibriumPath::Integration, steps)
        }
    };
    build_report(system, p_l, state, path, iterations, tol, notes)
}

/// Full state from the reduced unknowns `[theta (bus 1..), omega, p^c]`.
fn assemble_state(
    system: &System<'_>,
    p_l: &[f64],
    reference: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let lay = &system.layout;
    let network = system.network();
    let n = lay.n_buses;
    let (theta, rest) = v.split_at(n - 1);
    let (omega, pc) = (rest[0], rest[1]);
    let angle = |j: usize| if j == 0 { 0.0 } else { theta[j - 1] };
    let mut s = vec![0.0; lay.len];
    for (k, l) in network.lines.iter().enumerate() {
        s[k] = reference[k] + angle(l.from) - angle(l.to);
    }
    for g in 0..lay.n_gen {
        s[lay.omega + g] = omega;
    }
    let z = Zeta::from_omega(omega, pc);
    let mut supply = vec![0.0; n];
    for (j, bus) in network.buses.iter().enumerate() {
        let (x, o) = bus.devices.equilibrium(z)?;
        s[lay.x[j]..lay.x[j + 1]].copy_from_slice(&x);
        s[lay.pc + j] = pc;
        supply[j] = o.net_supply();
    }
    // psi = psi0 + W D^T y with D W D^T y = (s - p_L) - D psi0, W = 1/gamma
    let psi0 = lay.psi(reference);
    let r: Vec<f64> = (0..n)
        .map(|j| supply[j] - p_l[j] - system.comm.net_in(j, psi0))
        .collect();
    let weight: Vec<f64> = network.comm_links.iter().map(|c| 1.0 / c.gamma).collect();
    let edges: Vec<(usize, usize)> = network.comm_links.iter().map(|c| (c.from, c.to)).collect();
    let y = grounded_solve(n, &edges, &weight, &r)?;
    for (k, c) in network.comm_links.iter().enumerate() {
        // net_in uses +in -out, i.e. D[to] = 1, D[from] = -1
        s[lay.psi + k] = psi0[k] + weight[k] * (y[c.to] - y[c.from]);
    }
    if lay.observer {
        for (g, &j) in system.gens.iter().enumerate() {
            s[lay.chi + g] = p_l[j];
            s[lay.b + g] = omega + pc + p_l[j];
        }
    }
    Ok(s)
}

/// Integrates with constant load until every derivative stays below 1e-9
/// for one second.
fn settle(system: &System<'_>, p_l: &[f64], reference: &[f64]) -> Result<(Vec<f64>, usize)> {
    let dt = system.scenario.sim.dt;
    let hold = (1.0 / dt).ceil() as usize;
    let max_steps = (5000.0 / dt).ceil() as usize;
    let mut s = reference.to_vec();
    let mut ws = system.workspace();
    let n = s.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 4];
    let mut tmp = vec![0.0; n];
    let mut quiet = 0;
    for step in 0..max_steps {
        system.rhs_into(&s, p_l, &mut k[0], &mut ws)?;
        let size = k[0].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if size < 1e-9 {
            quiet += 1;
            if quiet >= hold {
                return Ok((s, step));
            }
        } else {
            quiet = 0;
        }
        rk4_tail(system, p_l, &mut s, dt, &mut k, &mut tmp, &mut ws)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state diverged while settling".into()));
        }
    }
    Err(Error::NewtonFailed {
        context: "equilibrium by integration".into(),
        residual: f64::NAN,
        iterations: max_steps,
    })
}

/// Completes an RK4 step whose first stage is already in `k[0]`.
pub(crate) fn rk4_tail(
    system: &System<'_>,
    p_l: &[f64],
    s: &mut [f64],
    h: f64,
    k: &mut [Vec<f64>],
    tmp: &mut [f64],
    ws: &mut Derived,
) -> Result<()> {
    let n = s.len();
    for i in 0..n {
        tmp[i] = s[i] + 0.5 * h * k[0][i];
    }
    system.rhs_into(tmp, p_l, &mut k[1], ws)?;
    for i in 0..n {
        tmp[i] = s[i] + 0.5 * h * k[1][i];
    }
    system.rhs_into(tmp, p_l, &mut k[2], ws)?;
    for i in 0..n {
        tmp[i] = s[i] + h * k[2][i];
    }
    system.rhs_into(tmp, p_l, &mut k[3], ws)?;
    for i in 0..n {
        s[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
    Ok(())
}

fn build_report(
    system: &System<'_>,
    p_l: &[f64],
    state: Vec<f64>,
    path: EquilibriumPath,
    iterations: usize,
    tol: f64,
    mut notes: Vec<String>,
) -> Result<EquilibriumReport> {
    let lay = &system.layout;
    let network = system.network();
    let derived = system.derived(&state, p_l)?;
    let ds = system.rhs(&state, p_l)?;
    let residual = ds.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let max_abs_eta = lay.eta(&state).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let security = SecurityReport {
        max_abs_eta,
        passed: max_abs_eta < std::f64::consts::FRAC_PI_2,
    };
    if !security.passed {
        notes.push("security constraint |eta| < pi/2 violated".into());
    }
    let pc = lay.pc(&state);
    let omega = derived.omega.first().copied().unwrap_or(0.0);
    let common_pc = pc.first().copied().unwrap_or(0.0);

    let snapshot = EquilibriumSnapshot {
        s: derived.outputs.iter().map(|o| o.net_supply()).collect(),
        p_l: p_l.to_vec(),
        d_u: derived.outputs.iter().map(|o| o.d_u).collect(),
        omega: derived.omega.clone(),
        pc: pc.to_vec(),
        chi: derived.chi.clone(),
    };
    let balance = equilibrium_balance_check(&snapshot, tol);

    let optimality = match oslc_problem(network, p_l) {
        Ok(problem) => {
            let mut p_m = Vec::new();
            let mut d_c = Vec::new();
            let mut price = None;
            for (j, bus) in network.buses.iter().enumerate() {
                let z = Zeta::from_omega(derived.omega[j], pc[j]);
                if let Some(b) = &bus.devices.supply {
                    p_m.push(derived.outputs[j].p_m);
                    price = price.or_else(|| signal_price(b, z));
                }
                if let Some(b) = &bus.devices.demand {
                    d_c.push(derived.outputs[j].d_c);
                    price = price.or_else(|| signal_price(b, z));
                }
            }
            let candidate = problem.candidate(p_m, d_c, price.unwrap_or(common_pc));
            let kkt = verify_kkt(&problem, &candidate, tol);
            match solve_oslc(&problem, 1e-13) {
                Ok(reference) => {
                    let max_allocation_error = candidate
                        .p_m
                        .iter()
                        .zip(&reference.p_m)
                        .chain(candidate.d_c.iter().zip(&reference.d_c))
                        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
                    let price_error = (candidate.price - reference.price).abs();
                    let passed = kkt.passed && max_allocation_error <= tol;
                    Some(OptimalityReport {
                        kkt,
                        candidate,
                        reference,
                        max_allocation_error,
                        price_error,
                        passed,
                    })
                }
                Err(e) => {
                    notes.push(format!("dispatch problem not solvable: {e}"));
                    None
                }
            }
        }
        Err(reason) => {
            notes.push(format!("optimality not checked: {reason}"));
            None
        }
    };
    if let ControllerMode::Observer { du_mismatch, .. } = system.scenario.mode {
        if du_mismatch != 0.0 {
            notes.push("observer damping model mismatched; estimates are biased".into());
        }
    }
    Ok(EquilibriumReport {
        state,
        p_l: p_l.to_vec(),
        derived,
        omega,
        pc: common_pc,
        path,
        iterations,
        residual,
        security,
        optimality,
        balance,
        notes,
    })
}

/// Every bus detached at the equilibrium, for passivity trials.
pub fn bus_assemblies(
    system: &System<'_>,
    eq: &EquilibriumReport,
    opts: &StorageOptions,
) -> Vec<BusAssembly> {
    let lay = &system.layout;
    let network = system.network();
    let psi = lay.psi(&eq.state);
    network
        .buses
        .iter()
        .enumerate()
        .map(|(j, bus)| {
            let x_eq = lay.x_bus(&eq.state, j).to_vec();
            let z = Zeta::from_omega(eq.derived.omega[j], eq.state[lay.pc + j]);
            BusAssembly {
                bus: bus.clone(),
                p_l: eq.p_l[j],
                omega_eq: eq.derived.omega[j],
                pc_eq: eq.state[lay.pc + j],
                storage: bus_storage(&bus.devices, &x_eq, z, opts),
                x_eq,
                u_eq: [-eq.derived.injection[j], system.comm.net_in(j, psi)],
            }
        })
        .collect()
}
