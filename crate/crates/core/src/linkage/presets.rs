//! Bundled configurations. Their m/u values and thresholds are repository
//! defaults, not measured parameters.

use super::config::LinkageConfig;
use super::LinkageError;

const PRESETS: &[(&str, &str)] = &[
    ("exact-kvnr", include_str!("../../data/presets/exact-kvnr.json")),
    ("ship-deterministic", include_str!("../../data/presets/ship-deterministic.json")),
    ("registry-probabilistic", include_str!("../../data/presets/registry-probabilistic.json")),
    ("dktk-bloom", include_str!("../../data/presets/dktk-bloom.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn load(name: &str) -> Result<LinkageConfig, LinkageError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| LinkageError::Config(format!("unknown preset {name:?}")))?;
    LinkageConfig::from_json(text)
}
