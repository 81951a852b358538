//! Service configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use linkwerk::fttp::{FttpConfig, Principal};
use linkwerk::linkage::{presets, LinkageConfig};
use linkwerk::registry::PseudonymDomain;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: line {line}, column {column}: {msg}")]
    Syntax { path: String, line: usize, column: usize, msg: String },
    #[error("{path}: field {field}: {msg}")]
    Field { path: String, field: String, msg: String },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LinkageSource {
    Preset { preset: String },
    Inline(Box<LinkageConfig>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RegistrySection {
    pub linkage: LinkageSource,
    pub registry_key_id: String,
    #[serde(default)]
    pub domains: Vec<PseudonymDomain>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ApiKey {
    pub key: String,
    pub principal: Principal,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Overridden by `LINKWERK_STATE_DIR`.
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    /// Overridden by `LINKWERK_KEYFILE`.
    #[serde(default)]
    pub key_file: Option<PathBuf>,
    pub registry: RegistrySection,
    #[serde(default)]
    pub fttp: Option<FttpConfig>,
    #[serde(default)]
    pub sites: Vec<String>,
    pub api_keys: Vec<ApiKey>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ServiceConfig = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            path: origin.into(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let field = |f: String, msg: String| ConfigError::Field { path: origin.into(), field: f, msg };
        self.linkage().map_err(|m| field("registry.linkage".into(), m))?;
        let mut seen = BTreeSet::new();
        for (i, d) in self.registry.domains.iter().enumerate() {
            if !seen.insert(&d.domain_id) {
                return Err(field(format!("registry.domains[{i}].domainId"), "duplicate domain".into()));
            }
            d.format.validate().map_err(|e| field(format!("registry.domains[{i}].format"), e.to_string()))?;
            if let Some(s) = &d.owner_site {
                if !self.sites.contains(s) {
                    return Err(field(format!("registry.domains[{i}].ownerSite"), format!("unknown site {s:?}")));
                }
            }
        }
        let mut keys = BTreeSet::new();
        for (i, k) in self.api_keys.iter().enumerate() {
            if k.key.len() < 8 {
                return Err(field(format!("apiKeys[{i}].key"), "at least 8 characters".into()));
            }
            if !keys.insert(&k.key) {
                return Err(field(format!("apiKeys[{i}].key"), "duplicate key".into()));
            }
            if let Principal::Site { site_id } = &k.principal {
                if !self.sites.contains(site_id) {
                    return Err(field(format!("apiKeys[{i}].principal.siteId"), format!("unknown site {site_id:?}")));
                }
            }
        }
        let f = self.fttp_config();
        f.bloom.validate().map_err(|e| field("fttp.bloom".into(), e.to_string()))?;
        if !(f.lower_threshold <= f.upper_threshold && f.upper_threshold <= 1.0) {
            return Err(field("fttp.lowerThreshold".into(), "need lowerThreshold <= upperThreshold <= 1".into()));
        }
        Ok(())
    }

    pub fn linkage(&self) -> Result<LinkageConfig, String> {
        let cfg = match &self.registry.linkage {
            LinkageSource::Preset { preset } => presets::load(preset).map_err(|e| e.to_string())?,
            LinkageSource::Inline(c) => (**c).clone(),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn fttp_config(&self) -> FttpConfig {
        self.fttp.clone().unwrap_or_else(FttpConfig::default_preset)
    }

    pub fn state_dir(&self) -> Option<PathBuf> {
        std::env::var_os("LINKWERK_STATE_DIR").map(PathBuf::from).or_else(|| self.state_dir.clone())
    }

    pub fn key_file(&self) -> Option<PathBuf> {
        std::env::var_os("LINKWERK_KEYFILE").map(PathBuf::from).or_else(|| self.key_file.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OK: &str = r#"{
  "registry": { "linkage": { "preset": "registry-probabilistic" }, "registryKeyId": "registry",
                "domains": [ { "domainId": "study", "derivationKeyId": "psn" } ] },
  "sites": ["A"],
  "apiKeys": [ { "key": "site-a-key", "principal": { "kind": "SITE", "siteId": "A" } } ]
}"#;

    #[test]
    fn minimal_config_parses() {
        let c = ServiceConfig::parse(OK, "t.json").unwrap();
        assert_eq!(c.listen, "127.0.0.1:8080");
        assert_eq!(c.fttp_config().upper_threshold, FttpConfig::default_preset().upper_threshold);
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let bad = OK.replace("\"sites\": [\"A\"],", "\"sites\": [\"A\"]");
        match ServiceConfig::parse(&bad, "t.json") {
            Err(ConfigError::Syntax { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let bad = OK.replace("\"siteId\": \"A\"", "\"siteId\": \"Z\"");
        let e = ServiceConfig::parse(&bad, "t.json").unwrap_err().to_string();
        assert!(e.contains("apiKeys[0].principal.siteId"), "{e}");
        let bad = OK.replace("registry-probabilistic", "nope");
        let e = ServiceConfig::parse(&bad, "t.json").unwrap_err().to_string();
        assert!(e.contains("registry.linkage"), "{e}");
        let bad = OK.replace("\"sites\"", "\"sties\"");
        assert!(matches!(ServiceConfig::parse(&bad, "t.json"), Err(ConfigError::Syntax { .. })));
    }
}
