//! Physical and communication graphs.

use std::collections::HashSet;

use serde::Serialize;

use crate::device::BusDevices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    /// Present iff the bus is a generator bus.
    pub inertia: Option<f64>,
    /// Power-command gain `gamma_j`.
    pub gamma: f64,
    pub devices: BusDevices,
}

impl Bus {
    pub fn is_generator(&self) -> bool {
        self.kind == BusKind::Generator
    }
}

/// Transmission line; `from` and `to` index into `NetworkModel::buses`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    pub nominal_flow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommLink {
    pub from: usize,
    pub to: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub comm_links: Vec<CommLink>,
}

/// Deviation of the power carried by a line at angle difference `eta`.
pub fn line_flow(eta: f64, line: &Line) -> f64 {
    line.susceptance * eta.sin() - line.nominal_flow
}

/// `-p^L + s - d^u - sum(out) + sum(in)`.
pub fn bus_imbalance(p_l: f64, s: f64, d_u: f64, inflows: &[f64], outflows: &[f64]) -> f64 {
    -p_l + s - d_u - outflows.iter().sum::<f64>() + inflows.iter().sum::<f64>()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.issues.push(msg.into());
    }
}

fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    if n == 0 {
        return true;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut components = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}

/// Lists structural problems; never fails.
pub fn validate(network: &NetworkModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = network.buses.len();
    if n == 0 {
        report.push("network has no buses");
        return report;
    }
    let mut ids = HashSet::new();
    for bus in &network.buses {
        if !ids.insert(bus.id.as_str()) {
            report.push(format!("duplicate bus id '{}'", bus.id));
        }
        match (bus.kind, bus.inertia) {
            (BusKind::Generator, Some(m)) if m > 0.0 && m.is_finite() => {}
            (BusKind::Generator, Some(m)) => report.push(format!(
                "bus '{}': inertia must be positive, got {m}",
                bus.id
            )),
            (BusKind::Generator, None) => {
                report.push(format!("bus '{}': generator bus without inertia", bus.id))
            }
            (BusKind::Load, Some(_)) => {
                report.push(format!("bus '{}': load bus must not carry inertia", bus.id))
            }
            (BusKind::Load, None) => {}
        }
        if !(bus.gamma > 0.0 && bus.gamma.is_finite()) {
            report.push(format!(
                "bus '{}': gamma must be positive, got {}",
                bus.id, bus.gamma
            ));
        }
        if bus.kind == BusKind::Load {
            let gain = bus.devices.damping_static_gain(0.0);
            let instantaneous = bus
                .devices
                .damping
                .as_ref()
                .map(|b| b.is_memoryless())
                .unwrap_or(false);
            if !(gain > 0.0 && instantaneous) {
                report.push(format!(
                    "bus '{}': algebraic bus unsolvable (load bus needs memoryless damping with positive gain)",
                    bus.id
                ));
            }
            if bus.devices.supply.is_some() {
                report.push(format!(
                    "bus '{}': load bus cannot host a supply block",
                    bus.id
                ));
            }
        }
    }

    let mut seen = HashSet::new();
    for (k, line) in network.lines.iter().enumerate() {
        if line.from >= n || line.to >= n {
            report.push(format!("line {k}: endpoint does not resolve to a bus"));
            continue;
        }
        if line.from == line.to {
            report.push(format!(
                "line {k}: self loop at bus '{}'",
                network.buses[line.from].id
            ));
        }
        if !(line.susceptance > 0.0 && line.susceptance.is_finite()) {
            report.push(format!(
                "line {k}: susceptance must be positive, got {}",
                line.susceptance
            ));
        }
        if !line.nominal_flow.is_finite() {
            report.push(format!("line {k}: nominal flow must be finite"));
        }
        let key = (line.from.min(line.to), line.from.max(line.to));
        if !seen.insert(key) {
            report.push(format!(
                "line {k}: duplicate or bidirectional line between '{}' and '{}'",
                network.buses[key.0].id, network.buses[key.1].id
            ));
        }
    }
    let mut seen = HashSet::new();
    for (k, link) in network.comm_links.iter().enumerate() {
        if link.from >= n || link.to >= n {
            report.push(format!("comm link {k}: endpoint does not resolve to a bus"));
            continue;
        }
        if link.from == link.to {
            report.push(format!("comm link {k}: self loop"));
        }
        if !(link.gamma > 0.0 && link.gamma.is_finite()) {
            report.push(format!(
                "comm link {k}: gamma must be positive, got {}",
                link.gamma
            ));
        }
        let key = (link.from.min(link.to), link.from.max(link.to));
        if !seen.insert(key) {
            report.push(format!("comm link {k}: duplicate or bidirectional link"));
        }
    }

    let valid_lines = network
        .lines
        .iter()
        .filter(|l| l.from < n && l.to < n)
        .map(|l| (l.from, l.to));
    if !connected(n, valid_lines) {
        report.push("physical graph disconnected");
    }
    let valid_links = network
        .comm_links
        .iter()
        .filter(|l| l.from < n && l.to < n)
        .map(|l| (l.from, l.to));
    if !connected(n, valid_links) {
        report.push("communication graph disconnected");
    }
    report
}

/// Incidence lists: for each bus, the indices of edges leaving and
/// entering it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Incidence {
    pub outgoing: Vec<Vec<usize>>,
    pub incoming: Vec<Vec<usize>>,
}

impl Incidence {
    pub fn build(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut inc = Incidence {
            outgoing: vec![Vec::new(); n],
            incoming: vec![Vec::new(); n],
        };
        for (k, (from, to)) in edges.enumerate() {
            inc.outgoing[from].push(k);
            inc.incoming[to].push(k);
        }
        inc
    }

    /// `sum(in) - sum(out)` of an edge quantity at bus `j`.
    pub fn net_in(&self, j: usize, values: &[f64]) -> f64 {
        self.incoming[j].iter().map(|&k| values[k]).sum::<f64>()
            - self.outgoing[j].iter().map(|&k| values[k]).sum::<f64>()
    }
}

impl NetworkModel {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn line_incidence(&self) -> Incidence {
        Incidence::build(self.buses.len(), self.lines.iter().map(|l| (l.from, l.to)))
    }

    pub fn comm_incidence(&self) -> Incidence {
        Incidence::build(
            self.buses.len(),
            self.comm_links.iter().map(|l| (l.from, l.to)),
        )
    }

    pub fn generator_indices(&self) -> Vec<usize> {
        (0..self.buses.len())
            .filter(|&j| self.buses[j].is_generator())
            .collect()
    }

    pub fn load_indices(&self) -> Vec<usize> {
        (0..self.buses.len())
            .filter(|&j| !self.buses[j].is_generator())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceBlock;
    use std::f64::consts::PI;

    fn bus(id: &str, kind: BusKind, lambda: f64) -> Bus {
        Bus {
            id: id.into(),
            kind,
            inertia: (kind == BusKind::Generator).then_some(4.0),
            gamma: 1.0,
            devices: BusDevices {
                damping: if lambda > 0.0 {
                    Some(DeviceBlock::linear_damping(lambda).unwrap())
                } else {
                    None
                },
                ..Default::default()
            },
        }
    }

    fn two_bus(load_lambda: f64) -> NetworkModel {
        NetworkModel {
            base_mva: 100.0,
            buses: vec![
                bus("a", BusKind::Generator, 1.0),
                bus("b", BusKind::Load, load_lambda),
            ],
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
        }
    }

    fn line(b: f64, nom: f64) -> Line {
        Line {
            from: 0,
            to: 1,
            susceptance: b,
            nominal_flow: nom,
        }
    }

    #[test]
    fn line_flow_examples() {
        assert_eq!(line_flow(0.0, &line(1.0, 0.0)), 0.0);
        assert!((line_flow(PI / 6.0, &line(2.0, 0.5)) - 0.5).abs() < 1e-15);
        assert!((line_flow(-PI / 6.0, &line(2.0, 0.0)) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn imbalance_examples() {
        assert_eq!(bus_imbalance(0.0, 0.0, 0.0, &[], &[]), 0.0);
        assert_eq!(bus_imbalance(1.0, 1.0, 0.0, &[], &[]), 0.0);
        let v = bus_imbalance(1.0, 0.0, 0.0, &[0.4], &[0.1]);
        let oracle = -1.0 + 0.0 - 0.0 - 0.1 + 0.4;
        assert!((v - oracle).abs() < 1e-15);
        assert!((v + 0.7).abs() < 1e-12);
    }

    #[test]
    fn validation_examples() {
        assert!(validate(&two_bus(1.0)).is_ok());

        let mut net = two_bus(1.0);
        net.buses.push(bus("c", BusKind::Generator, 1.0));
        net.lines.push(Line {
            from: 1,
            to: 2,
            susceptance: 1.0,
            nominal_flow: 0.0,
        });
        let r = validate(&net);
        assert_eq!(
            r.issues,
            vec!["communication graph disconnected".to_string()]
        );

        let r = validate(&two_bus(0.0));
        assert!(r
            .issues
            .iter()
            .any(|m| m.contains("algebraic bus unsolvable")));
    }

    #[test]
    fn validation_flags_structure() {
        let mut net = two_bus(1.0);
        net.lines.push(Line {
            from: 1,
            to: 0,
            susceptance: -1.0,
            nominal_flow: 0.0,
        });
        net.buses[0].inertia = Some(0.0);
        let r = validate(&net);
        assert!(r.issues.iter().any(|m| m.contains("bidirectional")));
        assert!(r.issues.iter().any(|m| m.contains("susceptance")));
        assert!(r.issues.iter().any(|m| m.contains("inertia")));
    }

    #[test]
    fn net_in_sums() {
        let inc = Incidence::build(3, [(0, 1), (1, 2), (2, 0)].into_iter());
        let flows = [1.0, 2.0, 4.0];
        assert_eq!(inc.net_in(0, &flows), 4.0 - 1.0);
        assert_eq!(inc.net_in(1, &flows), 1.0 - 2.0);
        let total: f64 = (0..3).map(|j| inc.net_in(j, &flows)).sum();
        assert_eq!(total, 0.0);
    }
}
