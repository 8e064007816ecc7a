//! Scenario files bundled with the library.

use crate::error::Result;

use super::{parse_scenario, Loaded, Strictness};

pub const TUTORIAL_4BUS: &str = include_str!("../../fixtures/tutorial_4bus.json");
pub const MIXED_10BUS: &str = include_str!("../../fixtures/mixed_10bus.json");
pub const OBSERVER_4BUS: &str = include_str!("../../fixtures/observer_4bus.json");

/// `(name, json)` of every bundled scenario.
pub const BUNDLED: [(&str, &str); 3] = [
    ("tutorial_4bus", TUTORIAL_4BUS),
    ("mixed_10bus", MIXED_10BUS),
    ("observer_4bus", OBSERVER_4BUS),
];

/// Loads a bundled scenario by name.
pub fn bundled(name: &str) -> Option<Result<Loaded>> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_scenario(text, Strictness::Strict))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixtures_load() {
        for (name, _) in BUNDLED {
            let l = bundled(name).unwrap().unwrap();
            assert!(l.scenario.issues().is_empty(), "{name}");
            assert_eq!(l.scenario.name, name);
        }
        assert!(bundled("nope").is_none());
    }
}
