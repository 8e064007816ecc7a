use gridfreq::certify::{StorageOptions, SupplyRateSpec, SweepOptions};
use gridfreq::io::fixtures::bundled;
use gridfreq::io::{
    emit_results, timeseries_csv, timeseries_header, CertificationSummary, EmitOptions,
};
use gridfreq::sim::run;

fn last_row(csv: &str) -> Vec<(String, f64)> {
    let mut lines = csv.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let last = lines.last().unwrap();
    header
        .into_iter()
        .zip(last.split(',').map(|v| v.parse::<f64>().unwrap()))
        .collect()
}

#[test]
fn mixed_marginal_costs_meet_at_the_end() {
    let sc = bundled("mixed_10bus").unwrap().unwrap().scenario;
    let out = run(&sc, &StorageOptions::default()).unwrap();
    let csv = timeseries_csv(&sc, &out);
    assert_eq!(csv.lines().count(), out.trajectory.samples.len() + 1);
    let row = last_row(&csv);
    // l8 sits on its bound at the new operating point
    let mc: Vec<f64> = row
        .iter()
        .filter(|(k, _)| k.starts_with("marginal_cost_") && k != "marginal_cost_l8")
        .map(|&(_, v)| v)
        .collect();
    assert!(mc.len() >= 5);
    let spread =
        mc.iter().cloned().fold(f64::MIN, f64::max) - mc.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 1e-3, "spread {spread}");
    for (k, v) in &row {
        if k.starts_with("omega_") {
            assert!(v.abs() < 1e-6, "{k} = {v}");
        }
    }
}

#[test]
fn observer_columns_present() {
    let sc = bundled("observer_4bus").unwrap().unwrap().scenario;
    let h = timeseries_header(&sc);
    assert!(h.iter().any(|c| c == "chi_g1"));
    assert!(h.iter().any(|c| c == "V_b"));
    let sc = bundled("tutorial_4bus").unwrap().unwrap().scenario;
    assert!(!timeseries_header(&sc).iter().any(|c| c.starts_with("chi_")));
}

#[test]
fn bundle_is_reproducible() {
    let mut sc = bundled("tutorial_4bus").unwrap().unwrap().scenario;
    sc.sim.t_end = 5.0;
    let dir = tempfile::tempdir().unwrap();
    let spec = SupplyRateSpec::default();
    let mut bytes = Vec::new();
    for sub in ["a", "b"] {
        let out = run(&sc, &StorageOptions::default()).unwrap();
        let cert = CertificationSummary::new(&sc, &out, &spec, &SweepOptions::default());
        let files = emit_results(
            &dir.path().join(sub),
            &sc,
            &out,
            &cert,
            &EmitOptions::default(),
        )
        .unwrap();
        assert_eq!(files.len(), 5);
        bytes.push(
            files
                .iter()
                .map(|f| std::fs::read(f).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(bytes[0], bytes[1]);
}
