//! Scenario files, synthetic networks and result output.

mod emit;
mod file;
pub mod fixtures;
mod synthetic;

use std::path::Path;

use crate::device::BusDevices;
use crate::error::{Error, Result, SchemaError};
use crate::sim::Scenario;

pub use emit::{
    certification_json, config_hash, emit_results, equilibrium_json, metadata_json, plot_script,
    timeseries_csv, timeseries_header, BusCertificate, BusEquilibrium, CertificationSummary,
    EmitOptions, EquilibriumJson, Metadata,
};
pub use file::{
    BoundsFile, BusFile, BusKindFile, CommLinkFile, ControllerFile, CostFile, CostType, DeviceFile,
    DeviceType, DevicesFile, DisturbanceFile, InitialFile, LineFile, ModeFile, ParamsFile,
    ScenarioFile, SimFile,
};
pub use synthetic::{generate_synthetic_network, generate_with, synthetic140, SyntheticOptions};

/// Treatment of keys the schema does not know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Unknown keys are schema errors.
    #[default]
    Strict,
    /// Unknown keys are reported as warnings.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    pub file: ScenarioFile,
    /// Pointers of ignored keys (lenient mode).
    pub warnings: Vec<String>,
}

/// Converts a serde path such as `buses[0].devices.supply` to a JSON pointer.
fn pointer_of(path: &serde_ignored::Path) -> String {
    use serde_ignored::Path as P;
    match path {
        P::Root => String::new(),
        P::Seq { parent, index } => format!("{}/{index}", pointer_of(parent)),
        P::Map { parent, key } => format!("{}/{}", pointer_of(parent), escape(key)),
        P::Some { parent } | P::NewtypeStruct { parent } | P::NewtypeVariant { parent } => {
            pointer_of(parent)
        }
    }
}

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

fn error_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape(key))),
            Segment::Enum { variant } => out.push_str(&format!("/{}", escape(variant))),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

/// Deserializes `text`, reporting the JSON pointer of the first type
/// error and collecting ignored keys.
fn deserialize_tracked<T: serde::de::DeserializeOwned>(
    text: &str,
    strictness: Strictness,
) -> Result<(T, Vec<String>)> {
    let mut ignored = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = {
        let mut record = |p: serde_ignored::Path| ignored.push(pointer_of(&p));
        let tracked = serde_ignored::Deserializer::new(&mut de, &mut record);
        match serde_path_to_error::deserialize(tracked) {
            Ok(v) => v,
            Err(e) => {
                let pointer = error_pointer(e.path());
                let inner = e.into_inner();
                if inner.is_syntax() || inner.is_eof() {
                    return Err(Error::Json(inner));
                }
                return Err(Error::Schema(vec![SchemaError::new(
                    pointer,
                    inner.to_string(),
                )]));
            }
        }
    };
    de.end().map_err(Error::Json)?;
    if strictness == Strictness::Strict && !ignored.is_empty() {
        return Err(Error::Schema(
            ignored
                .into_iter()
                .map(|p| SchemaError::new(p, "unknown key"))
                .collect(),
        ));
    }
    Ok((value, ignored))
}

/// Parses a scenario document. Syntax, type and range errors are
/// reported as [`Error::Schema`] with JSON pointers; network-level
/// problems as [`Error::Validation`].
pub fn parse_scenario(text: &str, strictness: Strictness) -> Result<Loaded> {
    let (file, warnings): (ScenarioFile, _) = deserialize_tracked(text, strictness)?;
    let scenario = file.to_scenario().map_err(Error::Schema)?;
    scenario.validate()?;
    Ok(Loaded {
        scenario,
        file,
        warnings,
    })
}

/// Parses the devices of one bus (`{"supply": ..., "demand": ...,
/// "damping": ...}`).
pub fn parse_devices(text: &str, strictness: Strictness) -> Result<(BusDevices, Vec<String>)> {
    let (file, warnings): (DevicesFile, _) = deserialize_tracked(text, strictness)?;
    let devices = file.to_devices().map_err(Error::Schema)?;
    Ok((devices, warnings))
}

pub fn load_scenario(path: impl AsRef<Path>, strictness: Strictness) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, strictness)
}

/// JSON text of a scenario; `None` when it holds custom blocks.
pub fn scenario_to_json(scenario: &Scenario) -> Option<String> {
    let file = ScenarioFile::from_scenario(scenario)?;
    serde_json::to_string_pretty(&file).ok()
}

/// The JSON Schema of scenario documents.
pub fn scenario_schema() -> String {
    let schema = schemars::schema_for!(ScenarioFile);
    let mut s = serde_json::to_string_pretty(&schema).expect("schema serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "buses": [
            {"id": "g", "kind": "generator", "inertia": 4, "gamma": 1,
             "devices": {"supply": {"type": "static_oslc", "cost": {"type": "quadratic", "coefficient": 1}},
                         "damping": {"type": "linear", "params": {"lambda": 1}}}},
            {"id": "l", "kind": "load", "gamma": 1,
             "devices": {"damping": {"type": "linear", "params": {"lambda": 1}}}}
        ],
        "lines": [{"from": "g", "to": "l", "susceptance": 10}],
        "comm_links": [{"from": "g", "to": "l", "gamma": 1}],
        "disturbances": [{"bus": "l", "time_s": 1, "delta_pu": 0.5}]
    }"#;

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        f(&mut v);
        v.to_string()
    }

    fn pointers(e: Error) -> Vec<String> {
        match e {
            Error::Schema(v) => v.into_iter().map(|e| e.pointer).collect(),
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn minimal_parses() {
        let l = parse_scenario(MINIMAL, Strictness::Strict).unwrap();
        assert_eq!(l.scenario.network.buses.len(), 2);
        assert_eq!(l.scenario.network.base_mva, 100.0);
        assert_eq!(l.scenario.disturbances[0].bus, 1);
    }

    #[test]
    fn negative_susceptance_points_at_field() {
        let text = edit(|v| v["lines"][0]["susceptance"] = (-1.0).into());
        assert_eq!(
            pointers(parse_scenario(&text, Strictness::Strict).unwrap_err()),
            ["/lines/0/susceptance"]
        );
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = edit(|v| v["buses"][1]["id"] = "g".into());
        let e = parse_scenario(&text, Strictness::Strict).unwrap_err();
        assert!(e.to_string().contains("duplicate bus id 'g'"), "{e}");
        assert!(e.is_validation());
    }

    #[test]
    fn unknown_keys_strict_and_lenient() {
        let text = edit(|v| v["buses"][0]["colour"] = "red".into());
        assert_eq!(
            pointers(parse_scenario(&text, Strictness::Strict).unwrap_err()),
            ["/buses/0/colour"]
        );
        let l = parse_scenario(&text, Strictness::Lenient).unwrap();
        assert_eq!(l.warnings, ["/buses/0/colour"]);
    }

    #[test]
    fn type_errors_carry_pointer() {
        let text = edit(|v| v["buses"][0]["gamma"] = "big".into());
        assert_eq!(
            pointers(parse_scenario(&text, Strictness::Strict).unwrap_err()),
            ["/buses/0/gamma"]
        );
        let text = edit(|v| v["buses"][0]["devices"]["supply"]["type"] = "nuclear".into());
        assert_eq!(
            pointers(parse_scenario(&text, Strictness::Strict).unwrap_err()),
            ["/buses/0/devices/supply/type"]
        );
    }

    #[test]
    fn missing_parameter_and_unknown_bus() {
        let text = edit(|v| {
            v["buses"][1]["devices"]["damping"]["params"] = serde_json::json!({});
            v["lines"][0]["to"] = "x".into();
        });
        let mut p = pointers(parse_scenario(&text, Strictness::Strict).unwrap_err());
        p.sort();
        assert_eq!(p, ["/buses/1/devices/damping/params/lambda", "/lines/0/to"]);
    }

    #[test]
    fn network_issues_are_validation_errors() {
        let text = edit(|v| v["lines"] = serde_json::json!([]));
        assert!(matches!(
            parse_scenario(&text, Strictness::Strict),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn syntax_error_is_json_error() {
        assert!(matches!(
            parse_scenario("{", Strictness::Strict),
            Err(Error::Json(_))
        ));
    }

    #[test]
    fn devices_document() {
        let text = r#"{"supply": {"type": "second_order_turbine",
            "params": {"k": 1, "tau_a": 1, "tau_b": 2, "lambda_pc": 1}},
            "damping": {"type": "linear", "params": {"lambda": 1}}}"#;
        let (d, _) = parse_devices(text, Strictness::Strict).unwrap();
        assert_eq!(d.state_dim(), 2);
        let bad = r#"{"damping": {"type": "linear"}}"#;
        assert_eq!(
            pointers(parse_devices(bad, Strictness::Strict).unwrap_err()),
            ["/damping/params/lambda"]
        );
    }

    #[test]
    fn round_trip() {
        let l = parse_scenario(MINIMAL, Strictness::Strict).unwrap();
        let text = scenario_to_json(&l.scenario).unwrap();
        let back = parse_scenario(&text, Strictness::Strict).unwrap();
        assert_eq!(back.scenario, l.scenario);
    }
}
