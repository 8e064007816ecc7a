//! Random geometric test networks.
//!
//! Buses are scattered in the unit square. The edge set is a Euclidean
//! minimum spanning tree plus every pair closer than a connection radius,
//! so both graphs are connected for any seed. The communication graph
//! reuses the physical topology.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::file::{
    BusFile, BusKindFile, CommLinkFile, CostFile, CostType, DeviceFile, DeviceType, DevicesFile,
    DisturbanceFile, LineFile, ParamsFile, ScenarioFile, SimFile,
};

/// Parameter ranges used by [`generate_synthetic_network`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOptions {
    pub inertia: (f64, f64),
    pub susceptance: (f64, f64),
    pub damping: (f64, f64),
    pub cost: (f64, f64),
    pub bus_gamma: (f64, f64),
    pub link_gamma: (f64, f64),
    /// Expected number of geometric neighbours per bus.
    pub mean_degree: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            inertia: (2.0, 10.0),
            susceptance: (5.0, 20.0),
            damping: (0.5, 2.0),
            cost: (0.5, 2.0),
            bus_gamma: (0.05, 0.2),
            link_gamma: (0.02, 0.1),
            mean_degree: 6.0,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    // round to keep the JSON short and exactly reproducible
    let v = rng.random_range(lo..=hi);
    (v * 1e4).round() / 1e4
}

fn edges(points: &[(f64, f64)], radius: f64) -> Vec<(usize, usize)> {
    let n = points.len();
    let d2 = |a: usize, b: usize| {
        let (dx, dy) = (points[a].0 - points[b].0, points[a].1 - points[b].1);
        dx * dx + dy * dy
    };
    // Prim on the complete graph
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    let mut out = Vec::new();
    in_tree[0] = true;
    for (j, b) in best.iter_mut().enumerate().skip(1) {
        *b = (d2(0, j), 0);
    }
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0))
            .expect("vertex left");
        in_tree[next] = true;
        let p = best[next].1;
        out.push((p.min(next), p.max(next)));
        for j in 0..n {
            if !in_tree[j] && d2(next, j) < best[j].0 {
                best[j] = (d2(next, j), next);
            }
        }
    }
    let r2 = radius * radius;
    for a in 0..n {
        for b in a + 1..n {
            if d2(a, b) < r2 && !out.contains(&(a, b)) {
                out.push((a, b));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Connected random network with `round(n_buses * gen_fraction)`
/// generator buses (at least one). Generators carry a static OSLC supply
/// and linear damping; load buses carry a static OSLC demand and linear
/// damping. No disturbances are attached.
///
/// # Panics
/// If `n_buses < 2`.
pub fn generate_synthetic_network(n_buses: usize, gen_fraction: f64, seed: u64) -> ScenarioFile {
    generate_with(n_buses, gen_fraction, seed, &SyntheticOptions::default())
}

pub fn generate_with(
    n_buses: usize,
    gen_fraction: f64,
    seed: u64,
    opts: &SyntheticOptions,
) -> ScenarioFile {
    assert!(n_buses >= 2, "synthetic network needs at least two buses");
    let n = n_buses;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let radius = (opts.mean_degree / (std::f64::consts::PI * n as f64)).sqrt();
    let topology = edges(&points, radius);

    let n_gen = ((n as f64 * gen_fraction.clamp(0.0, 1.0)).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_gen = vec![false; n];
    for &j in &order[..n_gen] {
        is_gen[j] = true;
    }

    let quad = |rng: &mut ChaCha8Rng| CostFile {
        kind: CostType::Quadratic,
        coefficient: draw(rng, opts.cost),
    };
    let oslc = |cost| DeviceFile {
        kind: DeviceType::StaticOslc,
        params: ParamsFile::default(),
        cost: Some(cost),
        bounds: None,
        prefilter: None,
        signal: None,
    };
    let linear = |lambda| DeviceFile {
        kind: DeviceType::Linear,
        params: ParamsFile {
            lambda: Some(lambda),
            ..Default::default()
        },
        cost: None,
        bounds: None,
        prefilter: None,
        signal: None,
    };
    let width = format!("{}", n - 1).len();
    let id = |j: usize| format!("b{:0width$}", j + 1);
    let buses = (0..n)
        .map(|j| {
            let (kind, inertia) = if is_gen[j] {
                (BusKindFile::Generator, Some(draw(&mut rng, opts.inertia)))
            } else {
                (BusKindFile::Load, None)
            };
            let gamma = draw(&mut rng, opts.bus_gamma);
            let cost = quad(&mut rng);
            let lambda = draw(&mut rng, opts.damping);
            let devices = if is_gen[j] {
                DevicesFile {
                    supply: Some(oslc(cost)),
                    demand: None,
                    damping: Some(linear(lambda)),
                }
            } else {
                DevicesFile {
                    supply: None,
                    demand: Some(oslc(cost)),
                    damping: Some(linear(lambda)),
                }
            };
            BusFile {
                id: id(j),
                kind,
                inertia,
                gamma,
                devices,
            }
        })
        .collect();
    let lines = topology
        .iter()
        .map(|&(a, b)| LineFile {
            from: id(a),
            to: id(b),
            susceptance: draw(&mut rng, opts.susceptance),
            nominal_flow: 0.0,
        })
        .collect();
    let comm_links = topology
        .iter()
        .map(|&(a, b)| CommLinkFile {
            from: id(a),
            to: id(b),
            gamma: draw(&mut rng, opts.link_gamma),
        })
        .collect();
    ScenarioFile {
        name: Some(format!("synthetic-{n}-seed{seed}")),
        base_mva: 100.0,
        buses,
        lines,
        comm_links,
        controller: Default::default(),
        disturbances: Vec::new(),
        sim: SimFile::default(),
        initial: Default::default(),
    }
}

/// 140 buses with 47 generators (a synthetic network, not a real
/// dataset), with 1 p.u. load steps at three load buses at t = 1 s and a
/// 100 s horizon.
pub fn synthetic140(seed: u64) -> ScenarioFile {
    let mut file = generate_synthetic_network(140, 47.0 / 140.0, seed);
    file.name = Some(format!("synthetic140-seed{seed}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let loads: Vec<&str> = file
        .buses
        .iter()
        .filter(|b| b.kind == BusKindFile::Load)
        .map(|b| b.id.as_str())
        .collect();
    let picked: Vec<String> = loads
        .choose_multiple(&mut rng, 3)
        .map(|s| s.to_string())
        .collect();
    file.disturbances = picked
        .into_iter()
        .map(|bus| DisturbanceFile {
            bus,
            time_s: 1.0,
            delta_pu: 1.0,
        })
        .collect();
    file.sim = SimFile {
        t_end_s: 100.0,
        dt_s: 0.01,
        decimation: 10,
        ..SimFile::default()
    };
    file
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::validate;

    #[test]
    fn two_buses_one_line() {
        let f = generate_synthetic_network(2, 0.5, 1);
        assert_eq!(f.lines.len(), 1);
        assert_eq!(f.comm_links.len(), 1);
        let sc = f.to_scenario().unwrap();
        assert!(validate(&sc.network).is_ok());
    }

    #[test]
    fn preset_shape() {
        let f = synthetic140(0);
        assert_eq!(f.buses.len(), 140);
        assert_eq!(
            f.buses
                .iter()
                .filter(|b| b.kind == BusKindFile::Generator)
                .count(),
            47
        );
        assert_eq!(f.disturbances.len(), 3);
        let sc = f.to_scenario().unwrap();
        assert!(validate(&sc.network).is_ok(), "{:?}", validate(&sc.network));
    }

    #[test]
    fn deterministic() {
        let a = serde_json::to_string(&generate_synthetic_network(30, 0.3, 7)).unwrap();
        let b = serde_json::to_string(&generate_synthetic_network(30, 0.3, 7)).unwrap();
        let c = serde_json::to_string(&generate_synthetic_network(30, 0.3, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameters_in_range() {
        let f = generate_synthetic_network(60, 0.4, 3);
        for b in &f.buses {
            if let Some(m) = b.inertia {
                assert!((2.0..=10.0).contains(&m));
            }
            let l = b.devices.damping.as_ref().unwrap().params.lambda.unwrap();
            assert!((0.5..=2.0).contains(&l));
        }
        for l in &f.lines {
            assert!((5.0..=20.0).contains(&l.susceptance));
        }
    }
}
