//! JSON scenario document and its conversion to and from [`Scenario`].

use std::collections::{BTreeMap, HashMap};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::device::{BusDevices, DeviceBlock, DeviceModel, LeadLag, Role};
use crate::error::SchemaError;
use crate::network::{Bus, BusKind, CommLink, Line, NetworkModel};
use crate::oslc::{Bounds, CostFunction, PriceSignal, StaticMap};
use crate::sim::{ControllerMode, Disturbance, InitialOverrides, Method, Scenario, SimConfig};
use crate::turbine::{FifthOrderTurbineParams, SecondOrderTurbineParams};

fn default_base_mva() -> f64 {
    100.0
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// System base power in MVA.
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub buses: Vec<BusFile>,
    #[serde(default)]
    pub lines: Vec<LineFile>,
    #[serde(default)]
    pub comm_links: Vec<CommLinkFile>,
    #[serde(default)]
    pub controller: ControllerFile,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceFile>,
    #[serde(default)]
    pub sim: SimFile,
    #[serde(default, skip_serializing_if = "is_default")]
    pub initial: InitialFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum BusKindFile {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct BusFile {
    pub id: String,
    pub kind: BusKindFile,
    /// Inertia in p.u. s^2; generator buses only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<f64>,
    /// Power-command gain.
    pub gamma: f64,
    #[serde(default)]
    pub devices: DevicesFile,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct DevicesFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supply: Option<DeviceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<DeviceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<DeviceFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    StaticOslc,
    FirstOrder,
    LagOslc,
    SecondOrderTurbine,
    FifthOrderTurbine,
    /// Damping `d^u = lambda omega`.
    Linear,
    /// Damping `tau d^u' = lambda omega - d^u`.
    Lag,
    /// Damping `d^u = lambda omega + cubic omega^3`.
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct DeviceFile {
    #[serde(rename = "type")]
    pub kind: DeviceType,
    #[serde(default, skip_serializing_if = "is_default")]
    pub params: ParamsFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<LeadLag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<PriceSignal>,
}

/// Model parameters; which ones apply depends on the device type.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct ParamsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_pc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cubic: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CostType {
    /// `C(p) = coefficient p^2 / 2`.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct CostFile {
    #[serde(rename = "type")]
    pub kind: CostType,
    pub coefficient: f64,
}

/// Box constraint; a missing side is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct BoundsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct LineFile {
    pub from: String,
    pub to: String,
    pub susceptance: f64,
    #[serde(default)]
    pub nominal_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct CommLinkFile {
    pub from: String,
    pub to: String,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ModeFile {
    #[default]
    Direct,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct ControllerFile {
    #[serde(default)]
    pub mode: ModeFile,
    /// Observer time constant (observer mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_chi: Option<f64>,
    /// Relative error of the observer's damping model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub du_mismatch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct DisturbanceFile {
    pub bus: String,
    pub time_s: f64,
    pub delta_pu: f64,
}

fn d_t_end() -> f64 {
    SimConfig::default().t_end
}
fn d_dt() -> f64 {
    SimConfig::default().dt
}
fn d_decimation() -> usize {
    SimConfig::default().decimation
}
fn d_rtol() -> f64 {
    SimConfig::default().rtol
}
fn d_atol() -> f64 {
    SimConfig::default().atol
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct SimFile {
    #[serde(default = "d_t_end")]
    pub t_end_s: f64,
    #[serde(default = "d_dt")]
    pub dt_s: f64,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "d_decimation")]
    pub decimation: usize,
    #[serde(default = "d_rtol")]
    pub rtol: f64,
    #[serde(default = "d_atol")]
    pub atol: f64,
}

impl Default for SimFile {
    fn default() -> Self {
        SimFile {
            t_end_s: d_t_end(),
            dt_s: d_dt(),
            method: Method::default(),
            decimation: d_decimation(),
            rtol: d_rtol(),
            atol: d_atol(),
        }
    }
}

/// Offsets added to the pre-disturbance equilibrium.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[schemars(deny_unknown_fields)]
pub struct InitialFile {
    /// Frequency offsets (rad/s) keyed by generator bus id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub omega: BTreeMap<String, f64>,
    /// Power-command offsets keyed by bus id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pc: BTreeMap<String, f64>,
    /// Line-angle offsets (rad) keyed by line index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eta: BTreeMap<usize, f64>,
}

struct Issues(Vec<SchemaError>);

impl Issues {
    fn push(&mut self, pointer: impl Into<String>, message: impl Into<String>) {
        self.0.push(SchemaError {
            pointer: pointer.into(),
            message: message.into(),
        });
    }

    fn positive(&mut self, pointer: String, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(pointer, format!("must be positive, got {v}"));
        }
    }
}

fn bounds_of(b: Option<BoundsFile>) -> Bounds {
    let b = b.unwrap_or_default();
    Bounds {
        min: b.min.unwrap_or(f64::NEG_INFINITY),
        max: b.max.unwrap_or(f64::INFINITY),
    }
}

fn bounds_file(b: Bounds) -> Option<BoundsFile> {
    let f = BoundsFile {
        min: b.min.is_finite().then_some(b.min),
        max: b.max.is_finite().then_some(b.max),
    };
    (f != BoundsFile::default()).then_some(f)
}

impl DeviceFile {
    fn to_block(&self, role: Role, ptr: &str, issues: &mut Issues) -> Option<DeviceBlock> {
        let p = &self.params;
        let missing = std::cell::RefCell::new(Vec::new());
        let need = |v: Option<f64>, name: &'static str| -> Option<f64> {
            if v.is_none() {
                missing.borrow_mut().push(name);
            }
            v
        };
        let cost = match self.cost {
            Some(c) => match CostFunction::quadratic(c.coefficient) {
                Ok(cost) => Some(cost),
                Err(e) => {
                    issues.push(format!("{ptr}/cost/coefficient"), e.to_string());
                    None
                }
            },
            None => None,
        };
        let signal = self.signal.unwrap_or_default();
        let needs_cost = matches!(
            self.kind,
            DeviceType::StaticOslc | DeviceType::FirstOrder | DeviceType::LagOslc
        );
        if needs_cost && self.cost.is_none() {
            issues.push(format!("{ptr}/cost"), "required for this device type");
        }
        if self.bounds.is_some()
            && !matches!(self.kind, DeviceType::StaticOslc | DeviceType::LagOslc)
        {
            issues.push(
                format!("{ptr}/bounds"),
                "bounds are only supported by static_oslc and lag_oslc",
            );
        }
        let sign = if role == Role::Demand { -1.0 } else { 1.0 };
        let map = |cost: CostFunction| StaticMap {
            cost,
            bounds: bounds_of(self.bounds),
            sign,
            signal,
        };
        let model = (|| -> Option<DeviceModel> {
            Some(match self.kind {
                DeviceType::StaticOslc => DeviceModel::StaticOslc(map(cost?)),
                DeviceType::FirstOrder => {
                    let mu = need(p.mu, "mu");
                    DeviceModel::FirstOrder {
                        mu: mu?,
                        cost: cost?,
                        sign,
                        signal,
                    }
                }
                DeviceType::LagOslc => {
                    let tau = need(p.tau, "tau");
                    DeviceModel::LagOslc {
                        tau: tau?,
                        map: map(cost?),
                    }
                }
                DeviceType::SecondOrderTurbine => {
                    let (k, ta, tb, lpc) = (
                        need(p.k, "k"),
                        need(p.tau_a, "tau_a"),
                        need(p.tau_b, "tau_b"),
                        need(p.lambda_pc, "lambda_pc"),
                    );
                    DeviceModel::SecondOrderTurbine(SecondOrderTurbineParams {
                        k: k?,
                        tau_a: ta?,
                        tau_b: tb?,
                        lambda_pc: lpc?,
                    })
                }
                DeviceType::FifthOrderTurbine => {
                    let d = FifthOrderTurbineParams::default();
                    DeviceModel::FifthOrderTurbine(FifthOrderTurbineParams {
                        k: p.k.unwrap_or(d.k),
                        t_s: p.t_s.unwrap_or(d.t_s),
                        t_3: p.t_3.unwrap_or(d.t_3),
                        t_c: p.t_c.unwrap_or(d.t_c),
                        t_4: p.t_4.unwrap_or(d.t_4),
                        t_5: p.t_5.unwrap_or(d.t_5),
                        lambda_pc: p.lambda_pc.unwrap_or(d.lambda_pc),
                    })
                }
                DeviceType::Linear => DeviceModel::LinearDamping {
                    lambda: need(p.lambda, "lambda")?,
                },
                DeviceType::Lag => {
                    let (lambda, tau) = (need(p.lambda, "lambda"), need(p.tau, "tau"));
                    DeviceModel::LagDamping {
                        lambda: lambda?,
                        tau: tau?,
                    }
                }
                DeviceType::Cubic => {
                    let (lambda, cubic) = (need(p.lambda, "lambda"), need(p.cubic, "cubic"));
                    DeviceModel::CubicDamping {
                        lambda: lambda?,
                        cubic: cubic?,
                    }
                }
            })
        })();
        for name in missing.into_inner() {
            issues.push(format!("{ptr}/params/{name}"), "required parameter missing");
        }
        let block = DeviceBlock::new(role, model?).and_then(|b| match self.prefilter {
            Some(f) => b.with_prefilter(f),
            None => Ok(b),
        });
        match block {
            Ok(b) => Some(b),
            Err(e) => {
                issues.push(ptr.to_string(), e.to_string());
                None
            }
        }
    }

    /// Document form of a block; `None` for custom blocks.
    pub fn from_block(block: &DeviceBlock) -> Option<DeviceFile> {
        let mut f = DeviceFile {
            kind: DeviceType::Linear,
            params: ParamsFile::default(),
            cost: None,
            bounds: None,
            prefilter: block.prefilter,
            signal: None,
        };
        let cost_file = |c: &CostFunction| match c {
            CostFunction::Quadratic { coefficient } => Some(CostFile {
                kind: CostType::Quadratic,
                coefficient: *coefficient,
            }),
            CostFunction::Custom(_) => None,
        };
        let signal = |s: PriceSignal| (s != PriceSignal::default()).then_some(s);
        match &block.model {
            DeviceModel::StaticOslc(m) => {
                f.kind = DeviceType::StaticOslc;
                f.cost = Some(cost_file(&m.cost)?);
                f.bounds = bounds_file(m.bounds);
                f.signal = signal(m.signal);
            }
            DeviceModel::FirstOrder {
                mu,
                cost,
                signal: s,
                ..
            } => {
                f.kind = DeviceType::FirstOrder;
                f.params.mu = Some(*mu);
                f.cost = Some(cost_file(cost)?);
                f.signal = signal(*s);
            }
            DeviceModel::LagOslc { tau, map } => {
                f.kind = DeviceType::LagOslc;
                f.params.tau = Some(*tau);
                f.cost = Some(cost_file(&map.cost)?);
                f.bounds = bounds_file(map.bounds);
                f.signal = signal(map.signal);
            }
            DeviceModel::SecondOrderTurbine(t) => {
                f.kind = DeviceType::SecondOrderTurbine;
                f.params.k = Some(t.k);
                f.params.tau_a = Some(t.tau_a);
                f.params.tau_b = Some(t.tau_b);
                f.params.lambda_pc = Some(t.lambda_pc);
            }
            DeviceModel::FifthOrderTurbine(t) => {
                f.kind = DeviceType::FifthOrderTurbine;
                f.params = ParamsFile {
                    k: Some(t.k),
                    t_s: Some(t.t_s),
                    t_3: Some(t.t_3),
                    t_c: Some(t.t_c),
                    t_4: Some(t.t_4),
                    t_5: Some(t.t_5),
                    lambda_pc: Some(t.lambda_pc),
                    ..Default::default()
                };
            }
            DeviceModel::LinearDamping { lambda } => {
                f.params.lambda = Some(*lambda);
            }
            DeviceModel::LagDamping { lambda, tau } => {
                f.kind = DeviceType::Lag;
                f.params.lambda = Some(*lambda);
                f.params.tau = Some(*tau);
            }
            DeviceModel::CubicDamping { lambda, cubic } => {
                f.kind = DeviceType::Cubic;
                f.params.lambda = Some(*lambda);
                f.params.cubic = Some(*cubic);
            }
            DeviceModel::Custom(_) => return None,
        }
        Some(f)
    }
}

impl DevicesFile {
    fn convert(&self, ptr: &str, issues: &mut Issues) -> BusDevices {
        let mut block = |d: &Option<DeviceFile>, role: Role, name: &str| {
            d.as_ref()
                .and_then(|d| d.to_block(role, &format!("{ptr}/{name}"), issues))
        };
        BusDevices {
            supply: block(&self.supply, Role::Supply, "supply"),
            demand: block(&self.demand, Role::Demand, "demand"),
            damping: block(&self.damping, Role::Damping, "damping"),
        }
    }

    /// Devices of a single bus, as used by the standalone certification
    /// input.
    pub fn to_devices(&self) -> Result<BusDevices, Vec<SchemaError>> {
        let mut issues = Issues(Vec::new());
        let devices = self.convert("", &mut issues);
        if issues.0.is_empty() {
            Ok(devices)
        } else {
            Err(issues.0)
        }
    }
}

impl ScenarioFile {
    /// Field-level checks and conversion. Errors carry JSON pointers.
    pub fn to_scenario(&self) -> Result<Scenario, Vec<SchemaError>> {
        let mut issues = Issues(Vec::new());
        issues.positive("/base_mva".into(), self.base_mva);
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut buses = Vec::with_capacity(self.buses.len());
        for (i, b) in self.buses.iter().enumerate() {
            let ptr = format!("/buses/{i}");
            if b.id.is_empty() {
                issues.push(format!("{ptr}/id"), "bus id must not be empty");
            }
            if index.insert(b.id.as_str(), i).is_some() {
                issues.push(format!("{ptr}/id"), format!("duplicate bus id '{}'", b.id));
            }
            issues.positive(format!("{ptr}/gamma"), b.gamma);
            let kind = match b.kind {
                BusKindFile::Generator => BusKind::Generator,
                BusKindFile::Load => BusKind::Load,
            };
            match (kind, b.inertia) {
                (BusKind::Generator, Some(m)) => issues.positive(format!("{ptr}/inertia"), m),
                (BusKind::Generator, None) => {
                    issues.push(format!("{ptr}/inertia"), "generator bus needs inertia")
                }
                (BusKind::Load, Some(_)) => {
                    issues.push(format!("{ptr}/inertia"), "load bus must not carry inertia")
                }
                (BusKind::Load, None) => {}
            }
            let devices = b.devices.convert(&format!("{ptr}/devices"), &mut issues);
            buses.push(Bus {
                id: b.id.clone(),
                kind,
                inertia: b.inertia,
                gamma: b.gamma,
                devices,
            });
        }
        let resolve = |id: &str, ptr: String, issues: &mut Issues| match index.get(id) {
            Some(&j) => j,
            None => {
                issues.push(ptr, format!("unknown bus '{id}'"));
                0
            }
        };
        let mut lines = Vec::new();
        for (k, l) in self.lines.iter().enumerate() {
            let ptr = format!("/lines/{k}");
            let from = resolve(&l.from, format!("{ptr}/from"), &mut issues);
            let to = resolve(&l.to, format!("{ptr}/to"), &mut issues);
            issues.positive(format!("{ptr}/susceptance"), l.susceptance);
            lines.push(Line {
                from,
                to,
                susceptance: l.susceptance,
                nominal_flow: l.nominal_flow,
            });
        }
        let mut comm_links = Vec::new();
        for (k, c) in self.comm_links.iter().enumerate() {
            let ptr = format!("/comm_links/{k}");
            let from = resolve(&c.from, format!("{ptr}/from"), &mut issues);
            let to = resolve(&c.to, format!("{ptr}/to"), &mut issues);
            issues.positive(format!("{ptr}/gamma"), c.gamma);
            comm_links.push(CommLink {
                from,
                to,
                gamma: c.gamma,
            });
        }
        let mut disturbances = Vec::new();
        for (k, d) in self.disturbances.iter().enumerate() {
            let ptr = format!("/disturbances/{k}");
            let bus = resolve(&d.bus, format!("{ptr}/bus"), &mut issues);
            if !(d.time_s >= 0.0 && d.time_s <= self.sim.t_end_s) {
                issues.push(
                    format!("{ptr}/time_s"),
                    format!("must lie in [0, t_end_s], got {}", d.time_s),
                );
            }
            disturbances.push(Disturbance {
                bus,
                time: d.time_s,
                delta: d.delta_pu,
            });
        }
        issues.positive("/sim/t_end_s".into(), self.sim.t_end_s);
        issues.positive("/sim/dt_s".into(), self.sim.dt_s);
        if self.sim.decimation == 0 {
            issues.push("/sim/decimation", "must be at least 1");
        }
        issues.positive("/sim/rtol".into(), self.sim.rtol);
        issues.positive("/sim/atol".into(), self.sim.atol);
        let mode = match self.controller.mode {
            ModeFile::Direct => {
                if self.controller.tau_chi.is_some() || self.controller.du_mismatch.is_some() {
                    issues.push(
                        "/controller",
                        "tau_chi and du_mismatch apply to observer mode only",
                    );
                }
                ControllerMode::Direct
            }
            ModeFile::Observer => {
                let tau_chi = match self.controller.tau_chi {
                    Some(t) => {
                        issues.positive("/controller/tau_chi".into(), t);
                        t
                    }
                    None => {
                        issues.push("/controller/tau_chi", "observer mode needs tau_chi");
                        1.0
                    }
                };
                ControllerMode::Observer {
                    tau_chi,
                    du_mismatch: self.controller.du_mismatch.unwrap_or(0.0),
                }
            }
        };
        let mut initial = InitialOverrides::default();
        for (id, &w) in &self.initial.omega {
            initial
                .omega
                .push((resolve(id, format!("/initial/omega/{id}"), &mut issues), w));
        }
        for (id, &p) in &self.initial.pc {
            initial
                .pc
                .push((resolve(id, format!("/initial/pc/{id}"), &mut issues), p));
        }
        for (&k, &e) in &self.initial.eta {
            if k >= self.lines.len() {
                issues.push(format!("/initial/eta/{k}"), "unknown line index");
            }
            initial.eta.push((k, e));
        }
        if !issues.0.is_empty() {
            return Err(issues.0);
        }
        Ok(Scenario {
            name: self.name.clone().unwrap_or_default(),
            network: NetworkModel {
                base_mva: self.base_mva,
                buses,
                lines,
                comm_links,
            },
            mode,
            disturbances,
            sim: SimConfig {
                t_end: self.sim.t_end_s,
                dt: self.sim.dt_s,
                method: self.sim.method,
                decimation: self.sim.decimation,
                rtol: self.sim.rtol,
                atol: self.sim.atol,
            },
            initial,
        })
    }

    /// Document form of a scenario. Fails for custom device blocks or
    /// costs, which have no JSON representation.
    pub fn from_scenario(sc: &Scenario) -> Option<ScenarioFile> {
        let net = &sc.network;
        let id = |j: usize| net.buses[j].id.clone();
        let mut buses = Vec::with_capacity(net.buses.len());
        for b in &net.buses {
            let dev = |d: &Option<DeviceBlock>| match d {
                Some(blk) => DeviceFile::from_block(blk).map(Some),
                None => Some(None),
            };
            buses.push(BusFile {
                id: b.id.clone(),
                kind: match b.kind {
                    BusKind::Generator => BusKindFile::Generator,
                    BusKind::Load => BusKindFile::Load,
                },
                inertia: b.inertia,
                gamma: b.gamma,
                devices: DevicesFile {
                    supply: dev(&b.devices.supply)?,
                    demand: dev(&b.devices.demand)?,
                    damping: dev(&b.devices.damping)?,
                },
            });
        }
        let controller = match sc.mode {
            ControllerMode::Direct => ControllerFile::default(),
            ControllerMode::Observer {
                tau_chi,
                du_mismatch,
            } => ControllerFile {
                mode: ModeFile::Observer,
                tau_chi: Some(tau_chi),
                du_mismatch: (du_mismatch != 0.0).then_some(du_mismatch),
            },
        };
        Some(ScenarioFile {
            name: (!sc.name.is_empty()).then(|| sc.name.clone()),
            base_mva: net.base_mva,
            buses,
            lines: net
                .lines
                .iter()
                .map(|l| LineFile {
                    from: id(l.from),
                    to: id(l.to),
                    susceptance: l.susceptance,
                    nominal_flow: l.nominal_flow,
                })
                .collect(),
            comm_links: net
                .comm_links
                .iter()
                .map(|c| CommLinkFile {
                    from: id(c.from),
                    to: id(c.to),
                    gamma: c.gamma,
                })
                .collect(),
            controller,
            disturbances: sc
                .disturbances
                .iter()
                .map(|d| DisturbanceFile {
                    bus: id(d.bus),
                    time_s: d.time,
                    delta_pu: d.delta,
                })
                .collect(),
            sim: SimFile {
                t_end_s: sc.sim.t_end,
                dt_s: sc.sim.dt,
                method: sc.sim.method,
                decimation: sc.sim.decimation,
                rtol: sc.sim.rtol,
                atol: sc.sim.atol,
            },
            initial: InitialFile {
                omega: sc.initial.omega.iter().map(|&(j, w)| (id(j), w)).collect(),
                pc: sc.initial.pc.iter().map(|&(j, p)| (id(j), p)).collect(),
                eta: sc.initial.eta.iter().copied().collect(),
            },
        })
    }
}
