//! The closed-loop Lyapunov function around an equilibrium:
//! `V = V_F + V_P + V_C + V_psi + sum V^D (+ V_b with the observer)`.

use serde::Serialize;

use crate::certify::{bus_storage, BusStorage, StorageOptions};
use crate::device::Zeta;

use super::equilibrium::EquilibriumReport;
use super::integrate::Trajectory;
use super::system::System;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LyapunovBreakdown {
    pub v_f: f64,
    pub v_p: f64,
    pub v_c: f64,
    pub v_psi: f64,
    pub v_d: f64,
    pub v_b: Option<f64>,
    pub total: f64,
}

/// `B [-cos eta + cos eta* - (eta - eta*) sin eta*]`.
pub fn potential_energy(susceptance: f64, eta: f64, eta_eq: f64) -> f64 {
    susceptance * (-eta.cos() + eta_eq.cos() - (eta - eta_eq) * eta_eq.sin())
}

/// Equilibrium and per-bus storage the Lyapunov function is built from.
#[derive(Debug, Clone)]
pub struct LyapunovReference {
    pub state: Vec<f64>,
    pub storages: Vec<BusStorage>,
    /// Buses without a storage function (their `V^D` is omitted).
    pub missing: Vec<String>,
}

impl LyapunovReference {
    pub fn new(system: &System<'_>, eq: &EquilibriumReport, opts: &StorageOptions) -> Self {
        let lay = &system.layout;
        let mut missing = Vec::new();
        let storages = system
            .network()
            .buses
            .iter()
            .enumerate()
            .map(|(j, bus)| {
                let z = Zeta::from_omega(eq.derived.omega[j], eq.state[lay.pc + j]);
                let st = bus_storage(&bus.devices, lay.x_bus(&eq.state, j), z, opts);
                if let BusStorage::Unavailable(reason) = &st {
                    missing.push(format!("bus '{}': {reason}", bus.id));
                }
                st
            })
            .collect();
        LyapunovReference {
            state: eq.state.clone(),
            storages,
            missing,
        }
    }

    pub fn complete(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn lyapunov_at(
    system: &System<'_>,
    reference: &LyapunovReference,
    s: &[f64],
) -> LyapunovBreakdown {
    let lay = &system.layout;
    let network = system.network();
    let eq = &reference.state;
    let mut v = LyapunovBreakdown::default();
    for (g, &j) in system.gens.iter().enumerate() {
        let w = s[lay.omega + g] - eq[lay.omega + g];
        v.v_f += 0.5 * network.buses[j].inertia.unwrap_or(1.0) * w * w;
    }
    for (k, line) in network.lines.iter().enumerate() {
        v.v_p += potential_energy(line.susceptance, s[k], eq[k]);
    }
    for (j, bus) in network.buses.iter().enumerate() {
        let p = s[lay.pc + j] - eq[lay.pc + j];
        v.v_c += 0.5 * bus.gamma * p * p;
        v.v_d += reference.storages[j].eval(lay.x_bus(s, j), lay.x_bus(eq, j));
    }
    for (k, link) in network.comm_links.iter().enumerate() {
        let p = s[lay.psi + k] - eq[lay.psi + k];
        v.v_psi += 0.5 * link.gamma * p * p;
    }
    if let super::ControllerMode::Observer { tau_chi, .. } = system.scenario.mode {
        let mut vb = 0.0;
        for (g, &j) in system.gens.iter().enumerate() {
            let m = network.buses[j].inertia.unwrap_or(1.0);
            let db = (s[lay.b + g] - eq[lay.b + g]) - (s[lay.omega + g] - eq[lay.omega + g]);
            let dc = s[lay.chi + g] - eq[lay.chi + g];
            vb += 0.5 * (m * db * db + tau_chi * dc * dc);
        }
        v.v_b = Some(vb);
    }
    v.total = v.v_f + v.v_p + v.v_c + v.v_psi + v.v_d + v.v_b.unwrap_or(0.0);
    v
}

pub fn lyapunov_series(
    system: &System<'_>,
    trajectory: &Trajectory,
    reference: &LyapunovReference,
) -> Vec<LyapunovBreakdown> {
    trajectory
        .samples
        .iter()
        .map(|smp| lyapunov_at(system, reference, &smp.state))
        .collect()
}

/// Tracks `V` at every integration step after `start`.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovMonitor {
    pub start: f64,
    /// `V` at the first step at or after `start`.
    pub v_start: Option<f64>,
    pub v_final: Option<f64>,
    /// Largest increase of `V` between consecutive steps.
    pub max_increase: f64,
    pub max_increase_time: Option<f64>,
    pub steps: usize,
    /// False when some bus lacks a storage function.
    pub enabled: bool,
    pub missing: Vec<String>,
    #[serde(skip)]
    last: Option<f64>,
}

impl LyapunovMonitor {
    pub fn new(start: f64, reference: &LyapunovReference) -> Self {
        LyapunovMonitor {
            start,
            v_start: None,
            v_final: None,
            max_increase: 0.0,
            max_increase_time: None,
            steps: 0,
            enabled: reference.complete(),
            missing: reference.missing.clone(),
            last: None,
        }
    }

    pub fn observe(&mut self, t: f64, v: f64) {
        if t < self.start - 1e-12 {
            return;
        }
        if self.v_start.is_none() {
            self.v_start = Some(v);
        }
        if let Some(prev) = self.last {
            if v - prev > self.max_increase {
                self.max_increase = v - prev;
                self.max_increase_time = Some(t);
            }
        }
        self.last = Some(v);
        self.v_final = Some(v);
        self.steps += 1;
    }

    /// `max_increase / V(start)`.
    pub fn relative_increase(&self) -> f64 {
        match self.v_start {
            Some(v0) if v0 > 0.0 => self.max_increase / v0,
            _ => 0.0,
        }
    }

    /// `V(final) / V(start)`.
    pub fn decay_ratio(&self) -> f64 {
        match (self.v_start, self.v_final) {
            (Some(v0), Some(v1)) if v0 > 0.0 => v1 / v0,
            _ => 0.0,
        }
    }

    pub fn passed(&self, step_tol: f64, decay_tol: f64) -> bool {
        !self.enabled || (self.relative_increase() <= step_tol && self.decay_ratio() <= decay_tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn potential_matches_quadrature() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = rng.random_range(0.5..5.0);
            let eq: f64 = rng.random_range(-1.0..1.0);
            let eta: f64 = rng.random_range(-1.5..1.5);
            // composite Simpson on sin(t) - sin(eq)
            let n = 2000;
            let h = (eta - eq) / n as f64;
            let f = |t: f64| t.sin() - eq.sin();
            let mut acc = f(eq) + f(eta);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(eq + i as f64 * h);
            }
            let quad = b * acc * h / 3.0;
            assert!((potential_energy(b, eta, eq) - quad).abs() < 1e-10);
        }
        assert_eq!(potential_energy(2.0, 0.3, 0.3), 0.0);
    }

    #[test]
    fn monitor_tracks_increase() {
        let reference = LyapunovReference {
            state: vec![],
            storages: vec![],
            missing: vec![],
        };
        let mut m = LyapunovMonitor::new(1.0, &reference);
        m.observe(0.5, 10.0);
        m.observe(1.0, 4.0);
        m.observe(1.1, 4.5);
        m.observe(1.2, 0.001);
        assert_eq!(m.v_start, Some(4.0));
        assert!((m.max_increase - 0.5).abs() < 1e-15);
        assert!((m.decay_ratio() - 0.00025).abs() < 1e-15);
        assert!(!m.passed(1e-6, 1e-3));
    }
}
