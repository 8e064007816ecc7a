//! Result bundle: time series CSV, JSON reports, metadata and a gnuplot
//! script.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::certify::{certify_bus, Certificate, SupplyRateSpec, SweepOptions};
use crate::consensus::BalanceReport;
use crate::device::{BusOutputs, Zeta};
use crate::error::Result;
use crate::sim::{
    ControllerMode, EquilibriumPath, EquilibriumReport, LyapunovMonitor, OptimalityReport,
    RunOutput, Scenario, SecurityReport, System,
};

use super::file::ScenarioFile;

pub const TIMESERIES: &str = "timeseries.csv";
pub const EQUILIBRIUM: &str = "equilibrium.json";
pub const CERTIFICATION: &str = "certification.json";
pub const METADATA: &str = "metadata.json";
pub const PLOT: &str = "plot.gp";

#[derive(Debug, Clone, Default)]
pub struct EmitOptions {
    /// Seed recorded in the metadata, if the run used one.
    pub seed: Option<u64>,
}

fn num(v: f64) -> String {
    format!("{v:.11e}")
}

/// Frequency deviations are integrated in rad/s and reported in Hz.
fn hz(omega: f64) -> f64 {
    omega / std::f64::consts::TAU
}

/// Marginal cost reported by a bus: the supply block if present,
/// otherwise the demand block.
fn marginal_cost(scenario: &Scenario, j: usize, out: &BusOutputs) -> Option<f64> {
    let dev = &scenario.network.buses[j].devices;
    dev.supply
        .as_ref()
        .and_then(|b| b.reported_marginal_cost(out.p_m))
        .or_else(|| {
            dev.demand
                .as_ref()
                .and_then(|b| b.reported_marginal_cost(out.d_c))
        })
}

fn has_marginal_cost(scenario: &Scenario, j: usize) -> bool {
    marginal_cost(scenario, j, &BusOutputs::default()).is_some()
}

/// Column names of the time series, in output order.
pub fn timeseries_header(scenario: &Scenario) -> Vec<String> {
    let buses = &scenario.network.buses;
    let mut h = vec!["time".to_string()];
    for prefix in ["omega", "pc", "s", "du"] {
        h.extend(buses.iter().map(|b| format!("{prefix}_{}", b.id)));
    }
    h.extend(
        buses
            .iter()
            .enumerate()
            .filter(|&(j, _)| has_marginal_cost(scenario, j))
            .map(|(_, b)| format!("marginal_cost_{}", b.id)),
    );
    let observer = matches!(scenario.mode, ControllerMode::Observer { .. });
    if observer {
        h.extend(buses.iter().map(|b| format!("chi_{}", b.id)));
    }
    h.extend(["V_F", "V_P", "V_C", "V_psi", "V_D"].map(String::from));
    if observer {
        h.push("V_b".into());
    }
    h.push("V_total".into());
    h
}

/// CSV text with one row per trajectory sample.
pub fn timeseries_csv(scenario: &Scenario, run: &RunOutput) -> String {
    let system = System::new(scenario);
    let lay = &system.layout;
    let n = scenario.network.buses.len();
    let observer = matches!(scenario.mode, ControllerMode::Observer { .. });
    let mc_buses: Vec<usize> = (0..n).filter(|&j| has_marginal_cost(scenario, j)).collect();
    let mut out = timeseries_header(scenario).join(",");
    out.push('\n');
    for (k, smp) in run.trajectory.samples.iter().enumerate() {
        let mut row: Vec<String> = vec![num(smp.t)];
        row.extend(smp.omega.iter().map(|&w| num(hz(w))));
        row.extend(smp.state[lay.pc..lay.pc + n].iter().map(|&p| num(p)));
        row.extend(smp.outputs.iter().map(|o| num(o.net_supply())));
        row.extend(smp.outputs.iter().map(|o| num(o.d_u)));
        for &j in &mc_buses {
            row.push(num(
                marginal_cost(scenario, j, &smp.outputs[j]).unwrap_or(f64::NAN)
            ));
        }
        if observer {
            let chi = smp.chi.as_deref().unwrap_or(&[]);
            row.extend((0..n).map(|j| num(chi.get(j).copied().unwrap_or(f64::NAN))));
        }
        let v = run.lyapunov.get(k).copied().unwrap_or_default();
        row.extend([v.v_f, v.v_p, v.v_c, v.v_psi, v.v_d].map(num));
        if observer {
            row.push(num(v.v_b.unwrap_or(f64::NAN)));
        }
        row.push(num(v.total));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BusEquilibrium {
    pub id: String,
    pub p_l: f64,
    /// Hz.
    pub omega: f64,
    pub pc: f64,
    pub p_m: f64,
    pub d_c: f64,
    pub d_u: f64,
    pub injection: f64,
    pub marginal_cost: Option<f64>,
    pub chi: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumJson {
    /// Common frequency deviation in Hz.
    pub omega: f64,
    pub pc: f64,
    pub path: EquilibriumPath,
    pub iterations: usize,
    pub residual: f64,
    pub passed: bool,
    pub buses: Vec<BusEquilibrium>,
    pub flows: Vec<f64>,
    pub security: SecurityReport,
    pub optimality: Option<OptimalityReport>,
    pub balance: BalanceReport,
    pub notes: Vec<String>,
}

impl EquilibriumJson {
    pub fn new(scenario: &Scenario, eq: &EquilibriumReport) -> Self {
        let lay = crate::sim::StateLayout::new(
            &scenario.network,
            matches!(scenario.mode, ControllerMode::Observer { .. }),
        );
        let d = &eq.derived;
        let buses = scenario
            .network
            .buses
            .iter()
            .enumerate()
            .map(|(j, b)| BusEquilibrium {
                id: b.id.clone(),
                p_l: eq.p_l[j],
                omega: hz(d.omega[j]),
                pc: eq.state[lay.pc + j],
                p_m: d.outputs[j].p_m,
                d_c: d.outputs[j].d_c,
                d_u: d.outputs[j].d_u,
                injection: d.injection[j],
                marginal_cost: marginal_cost(scenario, j, &d.outputs[j]),
                chi: d.chi.as_ref().map(|c| c[j]),
            })
            .collect();
        EquilibriumJson {
            omega: hz(eq.omega),
            pc: eq.pc,
            path: eq.path,
            iterations: eq.iterations,
            residual: eq.residual,
            passed: eq.passed(),
            buses,
            flows: d.flows.clone(),
            security: eq.security.clone(),
            optimality: eq.optimality.clone(),
            balance: eq.balance.clone(),
            notes: eq.notes.clone(),
        }
    }
}

pub fn equilibrium_json(scenario: &Scenario, eq: &EquilibriumReport) -> String {
    serde_json::to_string_pretty(&EquilibriumJson::new(scenario, eq)).expect("report serializes")
}

#[derive(Debug, Clone, Serialize)]
pub struct BusCertificate {
    pub bus: String,
    pub certificate: Option<Certificate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationSummary {
    pub spec: SupplyRateSpec,
    pub all_feasible: bool,
    pub buses: Vec<BusCertificate>,
    pub lyapunov: LyapunovMonitor,
}

impl CertificationSummary {
    /// Certifies every bus at the final equilibrium. Sweep samples are
    /// dropped from the stored certificates.
    pub fn new(
        scenario: &Scenario,
        run: &RunOutput,
        spec: &SupplyRateSpec,
        opts: &SweepOptions,
    ) -> Self {
        let lay = crate::sim::StateLayout::new(
            &scenario.network,
            matches!(scenario.mode, ControllerMode::Observer { .. }),
        );
        let eq = &run.equilibrium;
        let buses: Vec<BusCertificate> = scenario
            .network
            .buses
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let z = Zeta::from_omega(eq.derived.omega[j], eq.state[lay.pc + j]);
                match certify_bus(&b.devices, z, spec, opts) {
                    Ok(mut c) => {
                        c.sweep.clear();
                        BusCertificate {
                            bus: b.id.clone(),
                            certificate: Some(c),
                            error: None,
                        }
                    }
                    Err(e) => BusCertificate {
                        bus: b.id.clone(),
                        certificate: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        CertificationSummary {
            spec: *spec,
            all_feasible: buses
                .iter()
                .all(|b| b.certificate.as_ref().is_some_and(|c| c.feasible)),
            buses,
            lyapunov: run.monitor.clone(),
        }
    }
}

pub fn certification_json(summary: &CertificationSummary) -> String {
    serde_json::to_string_pretty(summary).expect("report serializes")
}

#[derive(Debug, Clone, Serialize)]
pub struct Units {
    pub time: &'static str,
    pub omega: &'static str,
    pub power: String,
    pub angle: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub name: String,
    pub version: &'static str,
    /// SHA-256 of the canonical scenario JSON.
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub units: Units,
    pub method: crate::sim::Method,
    pub samples: usize,
    pub steps: usize,
    pub aborted: Option<String>,
    pub files: Vec<&'static str>,
}

/// SHA-256 of the canonical JSON form of a scenario (debug text for
/// scenarios with custom blocks).
pub fn config_hash(scenario: &Scenario) -> String {
    let text = ScenarioFile::from_scenario(scenario)
        .and_then(|f| serde_json::to_string(&f).ok())
        .unwrap_or_else(|| format!("{scenario:?}"));
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn metadata_json(scenario: &Scenario, run: &RunOutput, opts: &EmitOptions) -> String {
    let meta = Metadata {
        name: scenario.name.clone(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: config_hash(scenario),
        seed: opts.seed,
        units: Units {
            time: "s",
            omega: "Hz deviation from nominal",
            power: format!("p.u. on {} MVA", scenario.network.base_mva),
            angle: "rad",
        },
        method: scenario.sim.method,
        samples: run.trajectory.samples.len(),
        steps: run.trajectory.steps,
        aborted: run.trajectory.aborted.clone(),
        files: vec![TIMESERIES, EQUILIBRIUM, CERTIFICATION, METADATA, PLOT],
    };
    serde_json::to_string_pretty(&meta).expect("metadata serializes")
}

/// Gnuplot script plotting frequencies and marginal costs from the CSV.
pub fn plot_script(scenario: &Scenario) -> String {
    let header = timeseries_header(scenario);
    let cols = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, _)| i + 1)
            .collect()
    };
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set xlabel 'time (s)'");
    let _ = writeln!(s, "set multiplot layout 2,1");
    let _ = writeln!(s, "set ylabel 'frequency deviation (Hz)'");
    let plot = |s: &mut String, c: &[usize]| {
        let parts: Vec<String> = c
            .iter()
            .map(|i| format!("'{TIMESERIES}' using 1:{i} with lines"))
            .collect();
        let _ = writeln!(
            s,
            "plot {}",
            if parts.is_empty() {
                "0 notitle".into()
            } else {
                parts.join(", \\\n     ")
            }
        );
    };
    plot(&mut s, &cols("omega_"));
    let _ = writeln!(s, "set ylabel 'marginal cost'");
    plot(&mut s, &cols("marginal_cost_"));
    let _ = writeln!(s, "unset multiplot");
    s
}

/// Writes the full result bundle into `out_dir` (created if missing) and
/// returns the written paths.
pub fn emit_results(
    out_dir: &Path,
    scenario: &Scenario,
    run: &RunOutput,
    certification: &CertificationSummary,
    opts: &EmitOptions,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let files = [
        (TIMESERIES, timeseries_csv(scenario, run)),
        (EQUILIBRIUM, equilibrium_json(scenario, &run.equilibrium)),
        (CERTIFICATION, certification_json(certification)),
        (METADATA, metadata_json(scenario, run, opts)),
        (PLOT, plot_script(scenario)),
    ];
    let mut written = Vec::new();
    for (name, mut body) in files {
        if !body.ends_with('\n') {
            body.push('\n');
        }
        let path = out_dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
