//! State layout and the closed-loop right-hand side.

use crate::consensus::{observer_rates, pc_rhs_into};
use crate::device::{BusOutputs, Zeta};
use crate::error::{Error, Result};
use crate::network::{line_flow, Incidence, NetworkModel};
use crate::numerics::decreasing_root;

use super::{ControllerMode, Scenario};

/// Offsets of the state blocks in the flat state vector
/// `[eta, omega (generators), x (per bus), p^c, psi, b, chi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub n_buses: usize,
    pub n_lines: usize,
    pub n_comm: usize,
    pub n_gen: usize,
    pub omega: usize,
    /// Device-state offset of every bus, plus the end offset.
    pub x: Vec<usize>,
    pub pc: usize,
    pub psi: usize,
    pub b: usize,
    pub chi: usize,
    pub len: usize,
    pub observer: bool,
}

impl StateLayout {
    pub fn new(network: &NetworkModel, observer: bool) -> Self {
        let n_lines = network.lines.len();
        let n_buses = network.buses.len();
        let n_gen = network.buses.iter().filter(|b| b.is_generator()).count();
        let omega = n_lines;
        let mut x = Vec::with_capacity(n_buses + 1);
        let mut off = omega + n_gen;
        for bus in &network.buses {
            x.push(off);
            off += bus.devices.state_dim();
        }
        x.push(off);
        let pc = off;
        let psi = pc + n_buses;
        let b = psi + network.comm_links.len();
        let n_obs = if observer { n_gen } else { 0 };
        let chi = b + n_obs;
        StateLayout {
            n_buses,
            n_lines,
            n_comm: network.comm_links.len(),
            n_gen,
            omega,
            x,
            pc,
            psi,
            b,
            chi,
            len: chi + n_obs,
            observer,
        }
    }

    pub fn eta<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[..self.n_lines]
    }

    pub fn omega_gen<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.omega..self.omega + self.n_gen]
    }

    pub fn x_bus<'a>(&self, s: &'a [f64], j: usize) -> &'a [f64] {
        &s[self.x[j]..self.x[j + 1]]
    }

    pub fn pc<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.pc..self.pc + self.n_buses]
    }

    pub fn psi<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.psi..self.psi + self.n_comm]
    }

    pub fn b<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.b..self.chi]
    }

    pub fn chi<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.chi..self.len]
    }
}

/// Non-state quantities implied by a state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Derived {
    /// Frequency at every bus (rad/s).
    pub omega: Vec<f64>,
    pub flows: Vec<f64>,
    /// `sum(in p) - sum(out p)` per bus.
    pub injection: Vec<f64>,
    pub outputs: Vec<BusOutputs>,
    /// Load estimate per bus (observer mode).
    pub chi: Option<Vec<f64>>,
}

impl Derived {
    fn sized(n_buses: usize, n_lines: usize, observer: bool) -> Self {
        Derived {
            omega: vec![0.0; n_buses],
            flows: vec![0.0; n_lines],
            injection: vec![0.0; n_buses],
            outputs: vec![BusOutputs::default(); n_buses],
            chi: observer.then(|| vec![0.0; n_buses]),
        }
    }
}

/// A scenario compiled for evaluation.
#[derive(Debug, Clone)]
pub struct System<'a> {
    pub scenario: &'a Scenario,
    pub layout: StateLayout,
    pub lines: Incidence,
    pub comm: Incidence,
    /// Generator slot of each bus.
    pub gen_slot: Vec<Option<usize>>,
    pub gens: Vec<usize>,
}

impl<'a> System<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let network = &scenario.network;
        let observer = matches!(scenario.mode, ControllerMode::Observer { .. });
        let gens = network.generator_indices();
        let mut gen_slot = vec![None; network.buses.len()];
        for (g, &j) in gens.iter().enumerate() {
            gen_slot[j] = Some(g);
        }
        System {
            scenario,
            layout: StateLayout::new(network, observer),
            lines: network.line_incidence(),
            comm: network.comm_incidence(),
            gen_slot,
            gens,
        }
    }

    pub fn network(&self) -> &NetworkModel {
        &self.scenario.network
    }

    pub fn workspace(&self) -> Derived {
        Derived::sized(
            self.layout.n_buses,
            self.layout.n_lines,
            self.layout.observer,
        )
    }

    fn du_model_factor(&self) -> f64 {
        match self.scenario.mode {
            ControllerMode::Observer { du_mismatch, .. } => 1.0 + du_mismatch,
            ControllerMode::Direct => 1.0,
        }
    }

    /// Fills `ws` and, when `ds` is given, the device-state derivatives.
    fn evaluate(
        &self,
        s: &[f64],
        p_l: &[f64],
        ws: &mut Derived,
        mut ds: Option<&mut [f64]>,
    ) -> Result<()> {
        let lay = &self.layout;
        let network = self.network();
        for (k, line) in network.lines.iter().enumerate() {
            ws.flows[k] = line_flow(s[k], line);
        }
        let pc = lay.pc(s);
        let factor = self.du_model_factor();
        for (j, bus) in network.buses.iter().enumerate() {
            let inj = self.lines.net_in(j, &ws.flows);
            ws.injection[j] = inj;
            let x = lay.x_bus(s, j);
            let omega = match self.gen_slot[j] {
                Some(g) => s[lay.omega + g],
                None => load_frequency(bus, x, pc[j], p_l[j], inj)?,
            };
            ws.omega[j] = omega;
            let z = Zeta::from_omega(omega, pc[j]);
            let out = match ds.as_deref_mut() {
                Some(ds) => bus.devices.eval_into(x, z, &mut ds[lay.x[j]..lay.x[j + 1]]),
                None => bus.devices.outputs(x, z),
            };
            ws.outputs[j] = out;
            if let Some(chi) = ws.chi.as_mut() {
                chi[j] = match self.gen_slot[j] {
                    Some(g) => s[lay.chi + g],
                    None => out.net_supply() - factor * out.d_u + inj,
                };
            }
        }
        Ok(())
    }

    pub fn derived(&self, s: &[f64], p_l: &[f64]) -> Result<Derived> {
        let mut ws = self.workspace();
        self.evaluate(s, p_l, &mut ws, None)?;
        Ok(ws)
    }

    /// Closed-loop derivative at state `s` under load `p_l`.
    pub fn rhs_into(&self, s: &[f64], p_l: &[f64], ds: &mut [f64], ws: &mut Derived) -> Result<()> {
        let lay = &self.layout;
        if s.len() != lay.len || ds.len() != lay.len {
            return Err(Error::Dimension {
                context: "simulation state",
                expected: lay.len,
                got: s.len().min(ds.len()),
            });
        }
        self.evaluate(s, p_l, ws, Some(ds))?;
        let network = self.network();
        for (k, line) in network.lines.iter().enumerate() {
            ds[k] = ws.omega[line.from] - ws.omega[line.to];
        }
        for (g, &j) in self.gens.iter().enumerate() {
            let o = ws.outputs[j];
            let m = network.buses[j].inertia.unwrap_or(1.0);
            ds[lay.omega + g] = (-p_l[j] + o.net_supply() - o.d_u + ws.injection[j]) / m;
        }
        let (head, tail) = ds.split_at_mut(lay.psi);
        let dpc = &mut head[lay.pc..];
        let (dpsi, dobs) = tail.split_at_mut(lay.n_comm);
        let pc = lay.pc(s);
        let psi = lay.psi(s);
        match (&ws.chi, self.scenario.mode) {
            (Some(chi), ControllerMode::Observer { tau_chi, .. }) => {
                pc_rhs_into(
                    network,
                    &self.comm,
                    pc,
                    psi,
                    |j| ws.outputs[j].net_supply() - chi[j],
                    dpc,
                    dpsi,
                );
                let factor = self.du_model_factor();
                let n_gen = lay.n_gen;
                for (g, &j) in self.gens.iter().enumerate() {
                    let o = ws.outputs[j];
                    let m = network.buses[j].inertia.unwrap_or(1.0);
                    let (db, dchi) = observer_rates(
                        m,
                        tau_chi,
                        s[lay.b + g],
                        s[lay.chi + g],
                        ws.omega[j],
                        pc[j],
                        o.net_supply() - factor * o.d_u + ws.injection[j],
                    );
                    dobs[g] = db;
                    dobs[n_gen + g] = dchi;
                }
            }
            _ => pc_rhs_into(
                network,
                &self.comm,
                pc,
                psi,
                |j| ws.outputs[j].net_supply() - p_l[j],
                dpc,
                dpsi,
            ),
        }
        Ok(())
    }

    pub fn rhs(&self, s: &[f64], p_l: &[f64]) -> Result<Vec<f64>> {
        let mut ds = vec![0.0; self.layout.len];
        let mut ws = self.workspace();
        self.rhs_into(s, p_l, &mut ds, &mut ws)?;
        Ok(ds)
    }
}

/// Frequency of a load bus from its algebraic power balance.
fn load_frequency(
    bus: &crate::network::Bus,
    x: &[f64],
    pc: f64,
    p_l: f64,
    injection: f64,
) -> Result<f64> {
    let dev = &bus.devices;
    decreasing_root(
        |w| {
            let z = Zeta::from_omega(w, pc);
            let o = dev.outputs(x, z);
            (
                -p_l + o.net_supply() - o.d_u + injection,
                dev.balance_omega_slope(x, z),
            )
        },
        0.0,
        1e-13 * (1.0 + p_l.abs() + injection.abs()),
        "load bus frequency",
    )
    .map_err(|e| match e {
        Error::NewtonFailed {
            residual,
            iterations,
            ..
        } => Error::NewtonFailed {
            context: format!("load bus '{}' frequency", bus.id),
            residual,
            iterations,
        },
        other => other,
    })
}

/// Frequency at every load bus, in the order of `NetworkModel::load_indices`.
pub fn solve_load_frequency(system: &System<'_>, s: &[f64], p_l: &[f64]) -> Result<Vec<f64>> {
    let d = system.derived(s, p_l)?;
    Ok(system
        .network()
        .load_indices()
        .into_iter()
        .map(|j| d.omega[j])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{BusDevices, DeviceBlock, DeviceModel, Role};
    use crate::network::{Bus, BusKind, CommLink, Line};
    use crate::oslc::{Bounds, CostFunction, PriceSignal};

    fn gen_bus(id: &str) -> Bus {
        Bus {
            id: id.into(),
            kind: BusKind::Generator,
            inertia: Some(2.0),
            gamma: 1.0,
            devices: BusDevices {
                supply: Some(
                    DeviceBlock::static_oslc(
                        Role::Supply,
                        CostFunction::quadratic(1.0).unwrap(),
                        Bounds::unbounded(),
                        PriceSignal::default(),
                    )
                    .unwrap(),
                ),
                demand: None,
                damping: Some(DeviceBlock::linear_damping(1.0).unwrap()),
            },
        }
    }

    fn load_bus(id: &str, damping: DeviceBlock) -> Bus {
        Bus {
            id: id.into(),
            kind: BusKind::Load,
            inertia: None,
            gamma: 1.0,
            devices: BusDevices {
                supply: None,
                demand: None,
                damping: Some(damping),
            },
        }
    }

    fn two_bus(damping: DeviceBlock) -> Scenario {
        Scenario::new(
            "two",
            NetworkModel {
                base_mva: 100.0,
                buses: vec![gen_bus("g"), load_bus("l", damping)],
                lines: vec![Line {
                    from: 0,
                    to: 1,
                    susceptance: 2.0,
                    nominal_flow: 0.0,
                }],
                comm_links: vec![CommLink {
                    from: 0,
                    to: 1,
                    gamma: 1.0,
                }],
            },
        )
    }

    #[test]
    fn linear_load_frequency_closed_form() {
        let sc = two_bus(DeviceBlock::linear_damping(2.0).unwrap());
        let sys = System::new(&sc);
        let mut s = vec![0.0; sys.layout.len];
        // flow 0 -> 1 equal to 1: 2 sin(eta) = 1
        s[0] = (0.5f64).asin();
        let w = solve_load_frequency(&sys, &s, &[0.0, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        let zero = vec![0.0; sys.layout.len];
        assert_eq!(
            solve_load_frequency(&sys, &zero, &[0.0, 0.0]).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn cubic_load_frequency_matches_bisection() {
        let cubic = DeviceBlock::new(
            Role::Damping,
            DeviceModel::CubicDamping {
                lambda: 2.0,
                cubic: 0.1,
            },
        )
        .unwrap();
        let sc = two_bus(cubic);
        let sys = System::new(&sc);
        let mut s = vec![0.0; sys.layout.len];
        s[0] = (0.5f64).asin();
        let w = solve_load_frequency(&sys, &s, &[0.0, 0.0]).unwrap()[0];
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 1.0 - 2.0 * mid - 0.1 * mid * mid * mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((w - 0.5 * (lo + hi)).abs() < 1e-9);
    }

    #[test]
    fn rhs_examples() {
        let sc = two_bus(DeviceBlock::linear_damping(1.0).unwrap());
        let sys = System::new(&sc);
        let mut s = vec![0.0; sys.layout.len];
        s[sys.layout.omega] = 0.1;
        let ds = sys.rhs(&s, &[0.0, 0.0]).unwrap();
        // the load bus frequency is zero with no flow or load
        assert!((ds[0] - 0.1).abs() < 1e-15);

        let single = Scenario::new(
            "one",
            NetworkModel {
                base_mva: 100.0,
                buses: vec![Bus {
                    devices: BusDevices {
                        damping: None,
                        ..gen_bus("g").devices
                    },
                    ..gen_bus("g")
                }],
                lines: vec![],
                comm_links: vec![],
            },
        );
        let sys = System::new(&single);
        let s = vec![0.0; sys.layout.len];
        let ds = sys.rhs(&s, &[1.0]).unwrap();
        assert!((ds[sys.layout.omega] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn layout_partitions_state() {
        let mut sc = two_bus(DeviceBlock::linear_damping(1.0).unwrap());
        sc.mode = ControllerMode::Observer {
            tau_chi: 1.0,
            du_mismatch: 0.0,
        };
        let lay = StateLayout::new(&sc.network, true);
        assert_eq!(lay.omega, 1);
        assert_eq!(lay.pc, 2);
        assert_eq!(lay.psi, 4);
        assert_eq!(lay.b, 5);
        assert_eq!(lay.chi, 6);
        assert_eq!(lay.len, 7);
    }
}
