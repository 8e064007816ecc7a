//! Time integration with step splitting at disturbance events.

use crate::certify::StorageOptions;
use crate::device::BusOutputs;
use crate::error::{Error, Result};

use super::equilibrium::{find_equilibrium, rk4_tail, EquilibriumReport};
use super::lyapunov::{
    lyapunov_at, lyapunov_series, LyapunovBreakdown, LyapunovMonitor, LyapunovReference,
};
use super::system::{Derived, System};
use super::{Method, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub state: Vec<f64>,
    /// Frequency at every bus (rad/s).
    pub omega: Vec<f64>,
    pub flows: Vec<f64>,
    pub outputs: Vec<BusOutputs>,
    pub chi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub steps: usize,
    /// Reason the integration stopped early; the last sample is the last
    /// good state.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Largest `|omega|` over all buses in the final sample.
    pub fn final_max_abs_omega(&self) -> f64 {
        self.last().map_or(f64::NAN, |s| {
            s.omega.iter().fold(0.0_f64, |m, w| m.max(w.abs()))
        })
    }
}

fn sample(system: &System<'_>, t: f64, s: &[f64], p_l: &[f64]) -> Result<Sample> {
    let d: Derived = system.derived(s, p_l)?;
    Ok(Sample {
        t,
        state: s.to_vec(),
        omega: d.omega,
        flows: d.flows,
        outputs: d.outputs,
        chi: d.chi,
    })
}

/// Integrates from `x0` over `[0, t_end]`. `observer` sees the state after
/// every accepted step (and the initial state) with the load in force.
pub fn integrate_with<F>(system: &System<'_>, x0: &[f64], mut observer: F) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &[f64]),
{
    let sc = system.scenario;
    sc.validate()?;
    let cfg = sc.sim;
    let n = system.layout.len;
    if x0.len() != n {
        return Err(Error::Dimension {
            context: "initial state",
            expected: n,
            got: x0.len(),
        });
    }
    let mut s = x0.to_vec();
    let mut p_l = sc.load_at(0.0);
    let mut traj = Trajectory::default();
    traj.samples.push(sample(system, 0.0, &s, &p_l)?);
    observer(0.0, &s, &p_l);

    let mut breaks = sc.event_times();
    breaks.push(cfg.t_end);
    let mut ws = system.workspace();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut last_good = s.clone();
    let mut t_good = 0.0;
    let mut t = 0.0;
    let mut since_sample = 0usize;
    for (seg, &end) in breaks.iter().enumerate() {
        let last_segment = seg + 1 == breaks.len();
        let start = t;
        let outcome = match cfg.method {
            Method::Rk4 => {
                let steps = ((end - start) / cfg.dt - 1e-9).ceil().max(1.0) as usize;
                let h = (end - start) / steps as f64;
                let mut res = Ok(());
                for i in 0..steps {
                    last_good.copy_from_slice(&s);
                    t_good = t;
                    let step = system
                        .rhs_into(&s, &p_l, &mut k[0], &mut ws)
                        .and_then(|_| rk4_tail(system, &p_l, &mut s, h, &mut k, &mut tmp, &mut ws));
                    t = if i + 1 == steps {
                        end
                    } else {
                        start + (i + 1) as f64 * h
                    };
                    if let Err(e) = step.and_then(|_| finite(&s, t)) {
                        res = Err(e);
                        break;
                    }
                    traj.steps += 1;
                    since_sample += 1;
                    observer(t, &s, &p_l);
                    if since_sample >= cfg.decimation || (last_segment && i + 1 == steps) {
                        traj.samples.push(sample(system, t, &s, &p_l)?);
                        since_sample = 0;
                    }
                }
                res
            }
            Method::Rk45 => dopri_segment(
                system,
                &mut s,
                &mut t,
                end,
                &p_l,
                &mut k,
                &mut tmp,
                &mut ws,
                |t, s, p| {
                    traj.steps += 1;
                    since_sample += 1;
                    observer(t, s, p);
                    if since_sample >= cfg.decimation || (last_segment && t >= end) {
                        since_sample = 0;
                        return true;
                    }
                    false
                },
            )
            .map(|samples| {
                for (ts, st) in samples {
                    if let Ok(smp) = sample(system, ts, &st, &p_l) {
                        traj.samples.push(smp);
                    }
                }
            }),
        };
        if let Err(e) = outcome {
            if cfg.method == Method::Rk4 && traj.samples.last().is_some_and(|l| l.t < t_good) {
                if let Ok(smp) = sample(system, t_good, &last_good, &p_l) {
                    traj.samples.push(smp);
                }
            }
            traj.aborted = Some(e.to_string());
            return Ok(traj);
        }
        p_l = sc.load_at(end);
    }
    Ok(traj)
}

fn finite(s: &[f64], t: f64) -> Result<()> {
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "state became non-finite at t = {t:.6}"
        )))
    }
}

const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince over `[t, end]`. `keep` decides which accepted
/// steps are stored; returns the stored `(t, state)` pairs.
#[allow(clippy::too_many_arguments)]
fn dopri_segment<F>(
    system: &System<'_>,
    s: &mut [f64],
    t: &mut f64,
    end: f64,
    p_l: &[f64],
    k: &mut [Vec<f64>],
    tmp: &mut [f64],
    ws: &mut Derived,
    mut keep: F,
) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: FnMut(f64, &[f64], &[f64]) -> bool,
{
    let cfg = system.scenario.sim;
    let n = s.len();
    let mut h = cfg.dt.min(end - *t);
    let mut out = Vec::new();
    let mut err = vec![0.0; n];
    while *t < end {
        h = h.min(end - *t);
        if h < 1e-14 * (1.0 + t.abs()) {
            return Err(Error::NonFinite(format!(
                "step size underflow at t = {:.6}",
                *t
            )));
        }
        for stage in 0..7 {
            for i in 0..n {
                let mut acc = s[i];
                for (j, a) in DP_A[stage].iter().enumerate().take(stage) {
                    acc += h * a * k[j][i];
                }
                tmp[i] = acc;
            }
            let (kk, _) = k.split_at_mut(stage + 1);
            system.rhs_into(tmp, p_l, &mut kk[stage], ws)?;
        }
        let mut norm: f64 = 0.0;
        for i in 0..n {
            let y5 = s[i] + h * (0..7).map(|j| DP_B[j] * k[j][i]).sum::<f64>();
            err[i] = h * (0..7).map(|j| DP_E[j] * k[j][i]).sum::<f64>();
            let sc = cfg.atol + cfg.rtol * s[i].abs().max(y5.abs());
            norm = norm.max((err[i] / sc).abs());
            tmp[i] = y5;
        }
        if !norm.is_finite() {
            h *= 0.25;
            continue;
        }
        if norm <= 1.0 {
            let reached_end = *t + h >= end - 1e-12 * (1.0 + end.abs());
            *t = if reached_end { end } else { *t + h };
            s.copy_from_slice(tmp);
            finite(s, *t)?;
            if keep(*t, s, p_l) {
                out.push((*t, s.to_vec()));
            }
        }
        let factor = if norm == 0.0 {
            5.0
        } else {
            (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Ok(out)
}

/// State to start a scenario from: the equilibrium under the
/// pre-disturbance load, with overrides applied.
pub fn initial_state(system: &System<'_>) -> Result<(Vec<f64>, EquilibriumReport)> {
    let sc = system.scenario;
    let eq = find_equilibrium(system, &sc.initial_load(), None, 1e-8)?;
    let mut s = eq.state.clone();
    let lay = &system.layout;
    for &(j, w) in &sc.initial.omega {
        if let Some(g) = system.gen_slot[j] {
            s[lay.omega + g] += w;
        }
    }
    for &(j, p) in &sc.initial.pc {
        s[lay.pc + j] += p;
    }
    for &(k, e) in &sc.initial.eta {
        s[k] += e;
    }
    Ok((s, eq))
}

/// Integrates a scenario from its initial state.
pub fn integrate(scenario: &Scenario) -> Result<Trajectory> {
    let system = System::new(scenario);
    scenario.validate()?;
    let (x0, _) = initial_state(&system)?;
    integrate_with(&system, &x0, |_, _, _| {})
}

/// Everything a simulation run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial: EquilibriumReport,
    /// Equilibrium under the final load, reached from the initial state.
    pub equilibrium: EquilibriumReport,
    pub trajectory: Trajectory,
    pub lyapunov: Vec<LyapunovBreakdown>,
    pub monitor: LyapunovMonitor,
}

/// Initial equilibrium, trajectory, final equilibrium and Lyapunov
/// monitoring after the last event.
pub fn run(scenario: &Scenario, storage: &StorageOptions) -> Result<RunOutput> {
    scenario.validate()?;
    let system = System::new(scenario);
    let (x0, initial) = initial_state(&system)?;
    let equilibrium = find_equilibrium(&system, &scenario.final_load(), Some(&x0), 1e-6)?;
    let reference = LyapunovReference::new(&system, &equilibrium, storage);
    let mut monitor = LyapunovMonitor::new(scenario.last_event_time(), &reference);
    let trajectory = integrate_with(&system, &x0, |t, s, _| {
        if monitor.enabled && t >= monitor.start - 1e-12 {
            monitor.observe(t, lyapunov_at(&system, &reference, s).total);
        }
    })?;
    let lyapunov = lyapunov_series(&system, &trajectory, &reference);
    Ok(RunOutput {
        initial,
        equilibrium,
        trajectory,
        lyapunov,
        monitor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{BusDevices, DeviceBlock, Role};
    use crate::network::{Bus, BusKind, CommLink, Line, NetworkModel};
    use crate::oslc::{Bounds, CostFunction, PriceSignal};
    use crate::sim::{Disturbance, SimConfig};

    fn scenario() -> Scenario {
        let g = |id: &str| Bus {
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
        };
        let mut sc = Scenario::new(
            "pair",
            NetworkModel {
                base_mva: 100.0,
                buses: vec![g("a"), g("b")],
                lines: vec![Line {
                    from: 0,
                    to: 1,
                    susceptance: 4.0,
                    nominal_flow: 0.0,
                }],
                comm_links: vec![CommLink {
                    from: 0,
                    to: 1,
                    gamma: 0.5,
                }],
            },
        );
        sc.sim = SimConfig {
            t_end: 5.0,
            dt: 1e-2,
            ..Default::default()
        };
        sc
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let sc = scenario();
        let traj = integrate(&sc).unwrap();
        let last = traj.last().unwrap();
        assert!(last.state.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(traj.samples[0].t, 0.0);
        assert!(traj.times().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn events_split_steps() {
        let mut sc = scenario();
        sc.disturbances.push(Disturbance {
            bus: 0,
            time: 1.005,
            delta: 0.5,
        });
        let system = System::new(&sc);
        let mut seen = Vec::new();
        let x0 = vec![0.0; system.layout.len];
        integrate_with(&system, &x0, |t, _, p| seen.push((t, p[0]))).unwrap();
        let at = seen.iter().position(|&(t, _)| t == 1.005).unwrap();
        assert_eq!(seen[at].1, 0.0);
        assert_eq!(seen[at + 1].1, 0.5);
    }

    #[test]
    fn adaptive_matches_fixed_step() {
        let mut sc = scenario();
        sc.disturbances.push(Disturbance {
            bus: 1,
            time: 0.5,
            delta: 1.0,
        });
        let a = integrate(&sc).unwrap();
        sc.sim.method = Method::Rk45;
        let b = integrate(&sc).unwrap();
        let (sa, sb) = (&a.last().unwrap().state, &b.last().unwrap().state);
        for (x, y) in sa.iter().zip(sb) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}
