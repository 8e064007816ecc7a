use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use gridfreq::certify::{
    certify_bus, check_bus_passivity, PassivityOptions, StorageOptions, SupplyMode, SupplyRateSpec,
    SweepOptions,
};
use gridfreq::device::Zeta;
use gridfreq::io::{
    emit_results, equilibrium_json, generate_synthetic_network, load_scenario, parse_devices,
    scenario_schema, synthetic140, CertificationSummary, EmitOptions, Loaded, Strictness,
};
use gridfreq::oslc::{solve_oslc, verify_kkt};
use gridfreq::sim::{
    bus_assemblies, find_equilibrium, initial_state, oslc_problem, run, Scenario, System,
};

#[derive(Parser)]
#[command(
    name = "gridfreq",
    version,
    about = "Distributed secondary frequency control toolkit"
)]
struct Cli {
    /// Warn about unknown keys instead of rejecting them.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// eps1 > 0 and eps2 > 0
    A,
    /// eps1 > 0, eps2 = 0, plus a zero condition
    B,
}

#[derive(clap::Args, Clone, Copy)]
struct SupplyArgs {
    #[arg(long, default_value_t = 1e-3)]
    eps1: f64,
    /// Defaults to 1e-3 in mode a and 0 in mode b.
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long, value_enum, default_value = "a")]
    mode: ModeArg,
}

impl SupplyArgs {
    fn spec(&self) -> anyhow::Result<SupplyRateSpec> {
        let (mode, eps2) = match self.mode {
            ModeArg::A => (SupplyMode::BothPenalized, self.eps2.unwrap_or(1e-3)),
            ModeArg::B => (SupplyMode::FrequencyPenalized, self.eps2.unwrap_or(0.0)),
        };
        let spec = SupplyRateSpec {
            eps1: self.eps1,
            eps2,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or more scenarios and write result bundles.
    Simulate {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Output directory; with several scenarios each gets a subdirectory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        supply: SupplyArgs,
    },
    /// Equilibrium under the final load, reachable from the initial state.
    Equilibrium { scenario: PathBuf },
    /// Optimal dispatch for the final load of a scenario.
    Oslc { scenario: PathBuf },
    /// Dissipativity certificates for every bus of a scenario, or for a
    /// devices document.
    Check {
        input: PathBuf,
        #[command(flatten)]
        supply: SupplyArgs,
    },
    /// Generate a synthetic network scenario.
    GenNetwork {
        #[arg(long, default_value_t = 140)]
        buses: usize,
        #[arg(long, default_value_t = 47.0 / 140.0)]
        gen_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = ["synthetic140"])]
        preset: Option<String>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized dissipation-inequality trials for one bus.
    Passivity {
        scenario: PathBuf,
        #[arg(long)]
        bus: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
    },
    /// Print the JSON Schema of scenario files.
    Schema,
}

fn strictness(lenient: bool) -> Strictness {
    if lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    }
}

fn load(path: &Path, lenient: bool) -> anyhow::Result<Scenario> {
    let Loaded {
        scenario, warnings, ..
    } = load_scenario(path, strictness(lenient))
        .with_context(|| format!("loading {}", path.display()))?;
    for w in warnings {
        log::warn!("{}: ignoring unknown key {w}", path.display());
    }
    Ok(scenario)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: serde_json::Value) -> anyhow::Result<()> {
    emit(&(serde_json::to_string_pretty(&value)? + "\n"))
}

fn thread_cap() -> usize {
    std::env::var("GRIDFREQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn simulate_one(scenario: &Scenario, out: &Path, spec: &SupplyRateSpec) -> anyhow::Result<()> {
    let result = run(scenario, &StorageOptions::default())?;
    if let Some(reason) = &result.trajectory.aborted {
        log::warn!("{}: integration stopped early: {reason}", scenario.name);
    }
    let summary = CertificationSummary::new(scenario, &result, spec, &SweepOptions::default());
    emit_results(out, scenario, &result, &summary, &EmitOptions::default())?;
    println!(
        "{}: final max|omega| {:.3e} Hz, equilibrium {}, certificates {}, results in {}",
        scenario.name,
        result.trajectory.final_max_abs_omega() / std::f64::consts::TAU,
        if result.equilibrium.passed() {
            "optimal"
        } else {
            "NOT optimal"
        },
        if summary.all_feasible {
            "feasible"
        } else {
            "incomplete"
        },
        out.display()
    );
    Ok(())
}

fn simulate(
    paths: &[PathBuf],
    out: &Path,
    spec: SupplyRateSpec,
    lenient: bool,
) -> anyhow::Result<()> {
    let scenarios = paths
        .iter()
        .map(|p| load(p, lenient))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if scenarios.len() == 1 {
        return simulate_one(&scenarios[0], out, &spec);
    }
    let dirs: Vec<PathBuf> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p.file_stem().map_or_else(
                || format!("scenario{i}"),
                |s| s.to_string_lossy().into_owned(),
            );
            out.join(format!("{i:02}_{stem}"))
        })
        .collect();
    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    let workers = thread_cap().min(scenarios.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sc) = scenarios.get(i) else { break };
                if let Err(e) = simulate_one(sc, &dirs[i], &spec) {
                    errors.lock().expect("error list").push((i, e));
                }
            });
        }
    });
    let mut errors = errors.into_inner().expect("error list");
    errors.sort_by_key(|(i, _)| *i);
    match errors.into_iter().next() {
        Some((i, e)) => Err(e.context(format!("scenario {}", paths[i].display()))),
        None => Ok(()),
    }
}

fn equilibrium(path: &Path, lenient: bool) -> anyhow::Result<()> {
    let scenario = load(path, lenient)?;
    let system = System::new(&scenario);
    let (x0, _) = initial_state(&system)?;
    let eq = find_equilibrium(&system, &scenario.final_load(), Some(&x0), 1e-6)?;
    emit(&(equilibrium_json(&scenario, &eq) + "\n"))
}

fn oslc(path: &Path, lenient: bool) -> anyhow::Result<()> {
    let scenario = load(path, lenient)?;
    let problem = oslc_problem(&scenario.network, &scenario.final_load())
        .map_err(gridfreq::Error::InvalidParameter)?;
    let sol = solve_oslc(&problem, 1e-12)?;
    let kkt = verify_kkt(&problem, &sol, 1e-6);
    let bus_id = |j: usize| scenario.network.buses[j].id.clone();
    let generators: Vec<_> = problem
        .generators
        .iter()
        .zip(&sol.p_m)
        .map(|(g, p)| json!({"bus": bus_id(g.bus), "p_m": p}))
        .collect();
    let demands: Vec<_> = problem
        .demands
        .iter()
        .zip(&sol.d_c)
        .map(|(d, v)| json!({"bus": bus_id(d.bus), "d_c": v}))
        .collect();
    print_json(json!({
        "price": sol.price,
        "cost": problem.objective(&sol.p_m, &sol.d_c),
        "generators": generators,
        "demands": demands,
        "solution": sol,
        "kkt": kkt,
    }))
}

fn check(path: &Path, supply: SupplyArgs, lenient: bool) -> anyhow::Result<()> {
    let spec = supply.spec()?;
    let opts = SweepOptions::default();
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(gridfreq::Error::Json)
        .with_context(|| format!("parsing {}", path.display()))?;
    if value.get("buses").is_none() {
        let (devices, warnings) = parse_devices(&text, strictness(lenient))?;
        for w in warnings {
            log::warn!("{}: ignoring unknown key {w}", path.display());
        }
        let cert = certify_bus(&devices, Zeta::default(), &spec, &opts)?;
        return print_json(json!(cert));
    }
    let scenario = load(path, lenient)?;
    let system = System::new(&scenario);
    let (x0, _) = initial_state(&system)?;
    let eq = find_equilibrium(&system, &scenario.final_load(), Some(&x0), 1e-6)?;
    let pc = system.layout.pc(&eq.state);
    let mut out = Vec::new();
    for (j, bus) in scenario.network.buses.iter().enumerate() {
        let z = Zeta::from_omega(eq.derived.omega[j], pc[j]);
        let cert = certify_bus(&bus.devices, z, &spec, &opts)?;
        out.push(json!({"bus": bus.id, "certificate": cert}));
    }
    print_json(json!(out))
}

fn gen_network(
    buses: usize,
    gen_fraction: f64,
    seed: u64,
    preset: Option<&str>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let file = match preset {
        Some(_) => synthetic140(seed),
        None => {
            if buses < 2 {
                return Err(
                    gridfreq::Error::InvalidParameter("--buses must be at least 2".into()).into(),
                );
            }
            if !(0.0..=1.0).contains(&gen_fraction) {
                return Err(gridfreq::Error::InvalidParameter(
                    "--gen-fraction must lie in [0, 1]".into(),
                )
                .into());
            }
            generate_synthetic_network(buses, gen_fraction, seed)
        }
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&text)?,
    }
    Ok(())
}

fn passivity(
    path: &Path,
    bus: &str,
    trials: usize,
    seed: u64,
    horizon: f64,
    lenient: bool,
) -> anyhow::Result<()> {
    let scenario = load(path, lenient)?;
    let j = scenario
        .network
        .bus_index(bus)
        .ok_or_else(|| gridfreq::Error::InvalidParameter(format!("unknown bus '{bus}'")))?;
    let system = System::new(&scenario);
    let (x0, _) = initial_state(&system)?;
    let eq = find_equilibrium(&system, &scenario.final_load(), Some(&x0), 1e-6)?;
    let assembly = bus_assemblies(&system, &eq, &StorageOptions::default()).swap_remove(j);
    let opts = PassivityOptions {
        trials,
        seed,
        horizon,
        ..PassivityOptions::default()
    };
    let report = check_bus_passivity(&assembly, &opts)?;
    print_json(json!({
        "bus": report.bus,
        "trials": report.trials,
        "max_violation": report.max_violation,
        "passed": report.passed,
        "skipped": report.skipped,
    }))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let lenient = cli.lenient;
    match cli.command {
        Command::Simulate {
            scenarios,
            out,
            supply,
        } => simulate(&scenarios, &out, supply.spec()?, lenient),
        Command::Equilibrium { scenario } => equilibrium(&scenario, lenient),
        Command::Oslc { scenario } => oslc(&scenario, lenient),
        Command::Check { input, supply } => check(&input, supply, lenient),
        Command::GenNetwork {
            buses,
            gen_fraction,
            seed,
            preset,
            out,
        } => gen_network(buses, gen_fraction, seed, preset.as_deref(), out.as_deref()),
        Command::Passivity {
            scenario,
            bus,
            trials,
            seed,
            horizon,
        } => passivity(&scenario, &bus, trials, seed, horizon, lenient),
        Command::Schema => emit(&scenario_schema()),
    }
}

/// 2 for invalid input, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gridfreq::Error>() {
            return if e.is_validation() || matches!(e, gridfreq::Error::Io(_)) {
                2
            } else {
                3
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
