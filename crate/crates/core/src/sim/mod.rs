//! Closed-loop simulation: scenario description, the semi-explicit DAE
//! right-hand side, fixed-step and adaptive integration, equilibria and
//! Lyapunov monitoring.

mod equilibrium;
mod integrate;
mod lyapunov;
mod system;

pub use equilibrium::{
    bus_assemblies, find_equilibrium, oslc_problem, EquilibriumPath, EquilibriumReport,
    OptimalityReport, SecurityReport,
};
pub use integrate::{initial_state, integrate, integrate_with, run, RunOutput, Sample, Trajectory};
pub use lyapunov::{
    lyapunov_at, lyapunov_series, potential_energy, LyapunovBreakdown, LyapunovMonitor,
    LyapunovReference,
};
pub use system::{solve_load_frequency, Derived, StateLayout, System};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{validate, NetworkModel};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ControllerMode {
    /// Power commands driven by the measured load.
    #[default]
    Direct,
    /// Load estimated by the observer. The observer models the damping as
    /// `(1 + du_mismatch) d^u`.
    Observer { tau_chi: f64, du_mismatch: f64 },
}

/// Step change of the load at one bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    pub bus: usize,
    pub time: f64,
    pub delta: f64,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rk4,
    /// Dormand-Prince 5(4) with step-size control.
    Rk45,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub method: Method,
    /// Keep every `decimation`-th step in the trajectory.
    pub decimation: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_end: 200.0,
            dt: 1e-3,
            method: Method::Rk4,
            decimation: 10,
            rtol: 1e-8,
            atol: 1e-10,
        }
    }
}

/// Offsets applied to the pre-disturbance equilibrium.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitialOverrides {
    /// `(bus, omega)` in rad/s; generator buses only.
    pub omega: Vec<(usize, f64)>,
    pub pc: Vec<(usize, f64)>,
    /// `(line, eta)` in rad.
    pub eta: Vec<(usize, f64)>,
}

impl InitialOverrides {
    pub fn is_empty(&self) -> bool {
        self.omega.is_empty() && self.pc.is_empty() && self.eta.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub network: NetworkModel,
    pub mode: ControllerMode,
    pub disturbances: Vec<Disturbance>,
    pub sim: SimConfig,
    pub initial: InitialOverrides,
}

impl Scenario {
    pub fn new(name: impl Into<String>, network: NetworkModel) -> Self {
        Scenario {
            name: name.into(),
            network,
            mode: ControllerMode::Direct,
            disturbances: Vec::new(),
            sim: SimConfig::default(),
            initial: InitialOverrides::default(),
        }
    }

    /// Problems with the scenario, including network validation.
    pub fn issues(&self) -> Vec<String> {
        let mut out = validate(&self.network).issues;
        let n = self.network.buses.len();
        let sim = &self.sim;
        if !(sim.dt > 0.0 && sim.dt.is_finite()) {
            out.push(format!("sim: dt must be positive, got {}", sim.dt));
        }
        if !(sim.t_end > 0.0 && sim.t_end.is_finite()) {
            out.push(format!("sim: t_end must be positive, got {}", sim.t_end));
        }
        if sim.decimation == 0 {
            out.push("sim: decimation must be at least 1".into());
        }
        if sim.method == Method::Rk45 && !(sim.rtol > 0.0 && sim.atol > 0.0) {
            out.push("sim: rtol and atol must be positive".into());
        }
        for (k, d) in self.disturbances.iter().enumerate() {
            if d.bus >= n {
                out.push(format!("disturbance {k}: unknown bus"));
            }
            if !(d.time >= 0.0 && d.time <= sim.t_end) {
                out.push(format!(
                    "disturbance {k}: time {} outside [0, t_end]",
                    d.time
                ));
            }
            if !d.delta.is_finite() {
                out.push(format!("disturbance {k}: delta must be finite"));
            }
        }
        if let ControllerMode::Observer {
            tau_chi,
            du_mismatch,
        } = self.mode
        {
            if !(tau_chi > 0.0 && tau_chi.is_finite()) {
                out.push(format!(
                    "controller: tau_chi must be positive, got {tau_chi}"
                ));
            }
            if !(du_mismatch > -1.0 && du_mismatch.is_finite()) {
                out.push(format!(
                    "controller: du_mismatch must exceed -1, got {du_mismatch}"
                ));
            }
        }
        for &(j, _) in &self.initial.omega {
            if j >= n || !self.network.buses[j].is_generator() {
                out.push("initial: omega overrides apply to generator buses only".into());
            }
        }
        for &(j, _) in &self.initial.pc {
            if j >= n {
                out.push("initial: unknown bus in pc override".into());
            }
        }
        for &(k, _) in &self.initial.eta {
            if k >= self.network.lines.len() {
                out.push("initial: unknown line in eta override".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(issues))
        }
    }

    /// Load deviation at every bus just after time `t`.
    pub fn load_at(&self, t: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.network.buses.len()];
        for d in &self.disturbances {
            if d.time <= t {
                p[d.bus] += d.delta;
            }
        }
        p
    }

    /// Load before any disturbance acts.
    pub fn initial_load(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.network.buses.len()];
        for d in &self.disturbances {
            if d.time < 0.0 {
                p[d.bus] += d.delta;
            }
        }
        p
    }

    pub fn final_load(&self) -> Vec<f64> {
        self.load_at(f64::INFINITY)
    }

    /// Distinct event times inside `(0, t_end)`, sorted.
    pub fn event_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .disturbances
            .iter()
            .map(|d| d.time)
            .filter(|&t| t > 0.0 && t < self.sim.t_end)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn last_event_time(&self) -> f64 {
        self.disturbances.iter().map(|d| d.time).fold(0.0, f64::max)
    }
}
