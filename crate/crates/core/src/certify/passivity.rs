//! Monte-Carlo check of the bus dissipation inequality
//! `V^B(T) - V^B(0) <= int_0^T u~^T y~ dt`.
//!
//! The isolated bus sees `u = [sum(out p) - sum(in p), sum(in psi) - sum(out psi)]`
//! and returns `y = [-omega, p^c]`; the storage is
//! `V^B = M omega~^2 / 2 + gamma p~c^2 / 2 + V^D(x~)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::BusStorage;
use crate::device::Zeta;
use crate::error::{Error, Result};
use crate::network::Bus;
use crate::numerics::decreasing_root;

/// A bus detached from the network, with its equilibrium.
#[derive(Debug, Clone)]
pub struct BusAssembly {
    pub bus: Bus,
    pub p_l: f64,
    pub omega_eq: f64,
    pub pc_eq: f64,
    pub x_eq: Vec<f64>,
    /// Port inputs at the equilibrium.
    pub u_eq: [f64; 2],
    pub storage: BusStorage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassivityOptions {
    pub horizon: f64,
    pub trials: usize,
    pub seed: u64,
    pub dt: f64,
    /// Peak amplitude of each sinusoid in the input deviation.
    pub input_amplitude: f64,
    /// Half-width of the uniform initial deviation of every state.
    pub initial_spread: f64,
    pub tol: f64,
}

impl Default for PassivityOptions {
    fn default() -> Self {
        PassivityOptions {
            horizon: 20.0,
            trials: 100,
            seed: 0,
            dt: 1e-3,
            input_amplitude: 0.05,
            initial_spread: 0.05,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub storage_initial: f64,
    pub storage_final: f64,
    pub supplied: f64,
    /// `V(T) - V(0) - supplied`; must not exceed the tolerance.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassivityReport {
    pub bus: String,
    pub trials: usize,
    pub max_violation: f64,
    pub passed: bool,
    pub skipped: Option<String>,
    pub results: Vec<TrialResult>,
}

/// Input deviation: a sum of three sinusoids per channel.
#[derive(Debug, Clone)]
struct InputSignal {
    terms: [[(f64, f64, f64); 3]; 2],
}

impl InputSignal {
    fn random(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let mut terms = [[(0.0, 0.0, 0.0); 3]; 2];
        for channel in terms.iter_mut() {
            for t in channel.iter_mut() {
                *t = (
                    amplitude * rng.random_range(-1.0..1.0),
                    rng.random_range(0.05..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
            }
        }
        InputSignal { terms }
    }

    fn at(&self, t: f64) -> [f64; 2] {
        let f = |c: &[(f64, f64, f64); 3]| c.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum();
        [f(&self.terms[0]), f(&self.terms[1])]
    }
}

/// State layout: `[omega (generators only), p^c, x..., supplied]`.
struct BusSystem<'a> {
    a: &'a BusAssembly,
    gen: bool,
    off: usize,
    nx: usize,
}

impl BusSystem<'_> {
    fn omega(&self, s: &[f64], u1: f64) -> Result<f64> {
        if self.gen {
            return Ok(s[0]);
        }
        let pc = s[self.off];
        let x = &s[self.off + 1..self.off + 1 + self.nx];
        let dev = &self.a.bus.devices;
        let p_l = self.a.p_l;
        decreasing_root(
            |w| {
                let z = Zeta::from_omega(w, pc);
                let o = dev.outputs(x, z);
                (
                    -p_l + o.net_supply() - o.d_u - u1,
                    dev.balance_omega_slope(x, z),
                )
            },
            self.a.omega_eq,
            1e-13,
            "isolated load bus frequency",
        )
    }

    fn rhs(&self, t: f64, s: &[f64], input: &InputSignal, ds: &mut [f64]) -> Result<()> {
        let du = input.at(t);
        let u = [self.a.u_eq[0] + du[0], self.a.u_eq[1] + du[1]];
        let omega = self.omega(s, u[0])?;
        let pc = s[self.off];
        let x = &s[self.off + 1..self.off + 1 + self.nx];
        let (head, tail) = ds.split_at_mut(self.off + 1);
        let out =
            self.a
                .bus
                .devices
                .eval_into(x, Zeta::from_omega(omega, pc), &mut tail[..self.nx]);
        let bal = -self.a.p_l + out.net_supply() - out.d_u - u[0];
        if self.gen {
            head[0] = bal / self.a.bus.inertia.unwrap_or(1.0);
        }
        head[self.off] = (-(out.net_supply() - self.a.p_l) + u[1]) / self.a.bus.gamma;
        // u~^T y~ with y = [-omega, p^c]
        tail[self.nx] = -du[0] * (omega - self.a.omega_eq) + du[1] * (pc - self.a.pc_eq);
        Ok(())
    }

    fn storage(&self, s: &[f64]) -> f64 {
        let mut v = 0.0;
        if self.gen {
            let w = s[0] - self.a.omega_eq;
            v += 0.5 * self.a.bus.inertia.unwrap_or(1.0) * w * w;
        }
        let p = s[self.off] - self.a.pc_eq;
        v += 0.5 * self.a.bus.gamma * p * p;
        v + self
            .a
            .storage
            .eval(&s[self.off + 1..self.off + 1 + self.nx], &self.a.x_eq)
    }
}

fn run_trial(
    sys: &BusSystem<'_>,
    opts: &PassivityOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult> {
    let input = InputSignal::random(rng, opts.input_amplitude);
    let n = sys.off + 1 + sys.nx + 1;
    let mut s = vec![0.0; n];
    let mut jitter = || opts.initial_spread * rng.random_range(-1.0..1.0);
    if sys.gen {
        s[0] = sys.a.omega_eq + jitter();
    }
    s[sys.off] = sys.a.pc_eq + jitter();
    for i in 0..sys.nx {
        s[sys.off + 1 + i] = sys.a.x_eq[i] + jitter();
    }
    let v0 = sys.storage(&s);
    let steps = (opts.horizon / opts.dt).ceil().max(1.0) as usize;
    let h = opts.horizon / steps as f64;
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let t = step as f64 * h;
        sys.rhs(t, &s, &input, &mut k[0])?;
        for i in 0..n {
            tmp[i] = s[i] + 0.5 * h * k[0][i];
        }
        sys.rhs(t + 0.5 * h, &tmp, &input, &mut k[1])?;
        for i in 0..n {
            tmp[i] = s[i] + 0.5 * h * k[1][i];
        }
        sys.rhs(t + 0.5 * h, &tmp, &input, &mut k[2])?;
        for i in 0..n {
            tmp[i] = s[i] + h * k[2][i];
        }
        sys.rhs(t + h, &tmp, &input, &mut k[3])?;
        for i in 0..n {
            s[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("passivity trial at t = {t}")));
        }
    }
    let v1 = sys.storage(&s);
    let supplied = s[n - 1];
    Ok(TrialResult {
        storage_initial: v0,
        storage_final: v1,
        supplied,
        violation: v1 - v0 - supplied,
    })
}

/// Runs `opts.trials` random-input simulations of the isolated bus.
pub fn check_bus_passivity(
    assembly: &BusAssembly,
    opts: &PassivityOptions,
) -> Result<PassivityReport> {
    if !(opts.horizon > 0.0 && opts.dt > 0.0) {
        return Err(Error::InvalidParameter(
            "horizon and dt must be positive".into(),
        ));
    }
    let bus = &assembly.bus;
    if let BusStorage::Unavailable(reason) = &assembly.storage {
        return Ok(PassivityReport {
            bus: bus.id.clone(),
            trials: 0,
            max_violation: f64::NAN,
            passed: false,
            skipped: Some(reason.clone()),
            results: Vec::new(),
        });
    }
    let gen = bus.is_generator();
    let sys = BusSystem {
        a: assembly,
        gen,
        off: usize::from(gen),
        nx: bus.devices.state_dim(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::with_capacity(opts.trials);
    for _ in 0..opts.trials {
        results.push(run_trial(&sys, opts, &mut rng)?);
    }
    let max_violation = results
        .iter()
        .map(|r| r.violation)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PassivityReport {
        bus: bus.id.clone(),
        trials: results.len(),
        max_violation,
        passed: results.iter().all(|r| r.violation <= opts.tol),
        skipped: None,
        results,
    })
}
