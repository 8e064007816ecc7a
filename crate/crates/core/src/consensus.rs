//! Power-command consensus dynamics and the load-estimating observer.
//!
//! `gamma_ij psi_ij' = p^c_i - p^c_j` on every communication link and
//! `gamma_j p^c_j' = -(s_j - p^L_j) - sum(out psi) + sum(in psi)` on every
//! bus. In observer mode `p^L` is replaced by the estimate `chi`, driven by
//! a copy of the swing equation.

use serde::Serialize;

use crate::network::{Incidence, NetworkModel};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerCommandState {
    pub pc: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsensusDerivatives {
    pub pc: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Observer states: `b` and `chi` for each generator bus, in the order of
/// `NetworkModel::generator_indices`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObserverState {
    pub b: Vec<f64>,
    pub chi: Vec<f64>,
    pub tau_chi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObserverDerivatives {
    pub pc: Vec<f64>,
    pub psi: Vec<f64>,
    pub b: Vec<f64>,
    pub chi: Vec<f64>,
    /// Load estimate at every bus (algebraic at load buses).
    pub chi_all: Vec<f64>,
}

/// Core update with a per-bus mismatch `s_j - estimate_j`.
pub(crate) fn pc_rhs_into(
    network: &NetworkModel,
    comm: &Incidence,
    pc: &[f64],
    psi: &[f64],
    mismatch: impl Fn(usize) -> f64,
    dpc: &mut [f64],
    dpsi: &mut [f64],
) {
    for (k, link) in network.comm_links.iter().enumerate() {
        dpsi[k] = (pc[link.from] - pc[link.to]) / link.gamma;
    }
    for (j, bus) in network.buses.iter().enumerate() {
        dpc[j] = (-mismatch(j) + comm.net_in(j, psi)) / bus.gamma;
    }
}

/// Consensus derivatives with the load measured directly.
pub fn pc_rhs(
    state: &PowerCommandState,
    s: &[f64],
    p_l: &[f64],
    network: &NetworkModel,
) -> ConsensusDerivatives {
    let comm = network.comm_incidence();
    let mut out = ConsensusDerivatives {
        pc: vec![0.0; network.buses.len()],
        psi: vec![0.0; network.comm_links.len()],
    };
    pc_rhs_into(
        network,
        &comm,
        &state.pc,
        &state.psi,
        |j| s[j] - p_l[j],
        &mut out.pc,
        &mut out.psi,
    );
    out
}

/// Observer-mode derivatives. `omega`, `s`, `d_u` are per bus, `flows` per
/// line; `d_u` is the damping the observer models.
pub fn observer_rhs(
    obs: &ObserverState,
    state: &PowerCommandState,
    omega: &[f64],
    s: &[f64],
    d_u: &[f64],
    flows: &[f64],
    network: &NetworkModel,
) -> ObserverDerivatives {
    let lines = network.line_incidence();
    let comm = network.comm_incidence();
    let n = network.buses.len();
    let gens = network.generator_indices();
    let mut gen_slot = vec![usize::MAX; n];
    for (g, &j) in gens.iter().enumerate() {
        gen_slot[j] = g;
    }
    let chi_all: Vec<f64> = (0..n)
        .map(|j| {
            if gen_slot[j] != usize::MAX {
                obs.chi[gen_slot[j]]
            } else {
                s[j] - d_u[j] + lines.net_in(j, flows)
            }
        })
        .collect();
    let mut out = ObserverDerivatives {
        pc: vec![0.0; n],
        psi: vec![0.0; network.comm_links.len()],
        b: vec![0.0; gens.len()],
        chi: vec![0.0; gens.len()],
        chi_all: chi_all.clone(),
    };
    pc_rhs_into(
        network,
        &comm,
        &state.pc,
        &state.psi,
        |j| s[j] - chi_all[j],
        &mut out.pc,
        &mut out.psi,
    );
    for (g, &j) in gens.iter().enumerate() {
        let m = network.buses[j].inertia.unwrap_or(1.0);
        (out.b[g], out.chi[g]) = observer_rates(
            m,
            obs.tau_chi[g],
            obs.b[g],
            obs.chi[g],
            omega[j],
            state.pc[j],
            s[j] - d_u[j] + lines.net_in(j, flows),
        );
    }
    out
}

/// `(b', chi')` at one generator bus; `injection = s - d^u + sum(in p) - sum(out p)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn observer_rates(
    m: f64,
    tau_chi: f64,
    b: f64,
    chi: f64,
    omega: f64,
    pc: f64,
    injection: f64,
) -> (f64, f64) {
    ((-chi + injection) / m, (b - omega - pc - chi) / tau_chi)
}

/// Steady-state quantities to check against the balance conditions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EquilibriumSnapshot {
    pub s: Vec<f64>,
    pub p_l: Vec<f64>,
    pub d_u: Vec<f64>,
    pub omega: Vec<f64>,
    pub pc: Vec<f64>,
    /// Load estimates per bus (observer mode only).
    pub chi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub supply_balance: f64,
    pub damping_sum: f64,
    pub max_abs_omega: f64,
    pub pc_spread: f64,
    pub max_estimate_error: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
    pub violations: Vec<String>,
}

/// Checks `sum s = sum p^L`, `sum d^u = 0`, `omega = 0`, equal power
/// commands and, with an observer, `chi = p^L`.
pub fn equilibrium_balance_check(snap: &EquilibriumSnapshot, tol: f64) -> BalanceReport {
    let supply_balance = (snap.s.iter().sum::<f64>() - snap.p_l.iter().sum::<f64>()).abs();
    let damping_sum = snap.d_u.iter().sum::<f64>().abs();
    let max_abs_omega = snap.omega.iter().fold(0.0_f64, |m, w| m.max(w.abs()));
    let pc_max = snap.pc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pc_min = snap.pc.iter().cloned().fold(f64::INFINITY, f64::min);
    let pc_spread = if snap.pc.is_empty() {
        0.0
    } else {
        pc_max - pc_min
    };
    let max_estimate_error = snap.chi.as_ref().map(|chi| {
        chi.iter()
            .zip(&snap.p_l)
            .fold(0.0_f64, |m, (c, p)| m.max((c - p).abs()))
    });
    let mut violations = Vec::new();
    let mut flag = |name: &str, v: f64| {
        if !(v <= tol) {
            violations.push(format!("{name} residual {v:.3e} exceeds {tol:.1e}"));
        }
    };
    flag("sum s - sum p_L", supply_balance);
    flag("sum d_u", damping_sum);
    flag("omega", max_abs_omega);
    flag("power command spread", pc_spread);
    if let Some(e) = max_estimate_error {
        flag("chi - p_L", e);
    }
    BalanceReport {
        supply_balance,
        damping_sum,
        max_abs_omega,
        pc_spread,
        max_estimate_error,
        tolerance: tol,
        passed: violations.is_empty(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{BusDevices, DeviceBlock};
    use crate::network::{Bus, BusKind, CommLink, Line};

    fn net(n: usize, gens: &[usize]) -> NetworkModel {
        NetworkModel {
            base_mva: 100.0,
            buses: (0..n)
                .map(|j| Bus {
                    id: j.to_string(),
                    kind: if gens.contains(&j) {
                        BusKind::Generator
                    } else {
                        BusKind::Load
                    },
                    inertia: gens.contains(&j).then_some(2.0),
                    gamma: 1.0,
                    devices: BusDevices {
                        damping: Some(DeviceBlock::linear_damping(1.0).unwrap()),
                        ..Default::default()
                    },
                })
                .collect(),
            lines: (1..n)
                .map(|j| Line {
                    from: j - 1,
                    to: j,
                    susceptance: 1.0,
                    nominal_flow: 0.0,
                })
                .collect(),
            comm_links: (1..n)
                .map(|j| CommLink {
                    from: j - 1,
                    to: j,
                    gamma: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn equilibrium_has_zero_derivatives() {
        let network = net(3, &[0]);
        let st = PowerCommandState {
            pc: vec![0.7; 3],
            psi: vec![0.0; 2],
        };
        let d = pc_rhs(&st, &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], &network);
        assert!(d.pc.iter().chain(&d.psi).all(|v| *v == 0.0));
    }

    #[test]
    fn direct_substitution() {
        let network = net(2, &[0]);
        let st = PowerCommandState {
            pc: vec![1.0, 0.0],
            psi: vec![0.0],
        };
        let d = pc_rhs(&st, &[0.0, 0.0], &[0.0, 0.0], &network);
        assert_eq!(d.psi, vec![1.0]);

        let single = net(1, &[0]);
        let st = PowerCommandState {
            pc: vec![0.0],
            psi: vec![],
        };
        let d = pc_rhs(&st, &[0.5], &[1.0], &single);
        assert_eq!(d.pc, vec![0.5]);
    }

    #[test]
    fn observer_equilibrium_relations() {
        let network = net(1, &[0]);
        let (p_l, pc, omega) = (0.8, 0.3, 0.0);
        let s = p_l; // balance with zero damping output
        let obs = ObserverState {
            b: vec![omega + pc + p_l],
            chi: vec![p_l],
            tau_chi: vec![0.5],
        };
        let st = PowerCommandState {
            pc: vec![pc],
            psi: vec![],
        };
        let d = observer_rhs(&obs, &st, &[omega], &[s], &[0.0], &[], &network);
        assert!(d
            .pc
            .iter()
            .chain(&d.b)
            .chain(&d.chi)
            .all(|v| v.abs() < 1e-15));

        let zero = ObserverState {
            b: vec![0.0],
            chi: vec![0.0],
            tau_chi: vec![0.5],
        };
        let st = PowerCommandState {
            pc: vec![0.0],
            psi: vec![],
        };
        let d = observer_rhs(&zero, &st, &[0.0], &[0.0], &[0.0], &[], &network);
        assert!(d.pc.iter().chain(&d.b).chain(&d.chi).all(|v| *v == 0.0));
    }

    #[test]
    fn observer_load_bus_is_algebraic() {
        let network = net(2, &[0]);
        let obs = ObserverState {
            b: vec![0.0],
            chi: vec![0.0],
            tau_chi: vec![1.0],
        };
        let st = PowerCommandState {
            pc: vec![0.0; 2],
            psi: vec![0.0],
        };
        let d = observer_rhs(
            &obs,
            &st,
            &[0.0, 0.0],
            &[0.0, -0.2],
            &[0.0, 0.1],
            &[0.5],
            &network,
        );
        assert!((d.chi_all[1] - (-0.2 - 0.1 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn balance_check() {
        let ok = EquilibriumSnapshot {
            s: vec![0.0; 3],
            p_l: vec![0.0; 3],
            d_u: vec![0.0; 3],
            omega: vec![0.0; 3],
            pc: vec![0.0; 3],
            chi: None,
        };
        let r = equilibrium_balance_check(&ok, 1e-9);
        assert!(r.passed);
        assert_eq!(r.supply_balance, 0.0);
        let biased = EquilibriumSnapshot {
            s: vec![0.5, 0.0, 0.0],
            ..ok
        };
        let r = equilibrium_balance_check(&biased, 1e-9);
        assert!(!r.passed);
        assert!(r.violations[0].contains("sum s"));
    }
}
