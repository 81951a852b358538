use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::blocking::KeyPart;
use super::{config_err, LinkageError};
use crate::idmodel::Field;
use crate::pprl::BloomParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Comparator {
    Exact,
    Levenshtein,
    Date,
    Phonetic,
    BloomDice,
    UniqueId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MissingPolicy {
    #[default]
    IgnoreRenormalize,
    Disagree,
}

/// Relative value frequencies of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FrequencyTable {
    pub attribute: String,
    pub frequencies: BTreeMap<String, f64>,
    pub default_frequency: f64,
}

impl FrequencyTable {
    /// Empirical frequencies; unseen values get `1 / (2 · corpus size)`.
    pub fn from_values<I, S>(attribute: &str, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut n = 0usize;
        for v in values {
            *counts.entry(v.into()).or_default() += 1;
            n += 1;
        }
        let n = n.max(1) as f64;
        FrequencyTable {
            attribute: attribute.to_string(),
            frequencies: counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
            default_frequency: 1.0 / (2.0 * n),
        }
    }

    /// Value-specific u: the table frequency, floored at the default.
    pub fn frequency(&self, value: &str) -> f64 {
        self.frequencies
            .get(value)
            .copied()
            .unwrap_or(self.default_frequency)
            .max(self.default_frequency)
    }

    /// Chance that two random values agree, `Σ f²`, floored at the default.
    pub fn coincidence(&self) -> f64 {
        self.frequencies.values().map(|f| f * f).sum::<f64>().max(self.default_frequency)
    }

    fn validate(&self) -> Result<(), LinkageError> {
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(self.default_frequency) || !self.frequencies.values().all(|f| ok(*f)) {
            return config_err(format!("frequency table {}: values must be in (0, 1]", self.attribute));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UProb {
    Fixed(f64),
    Table(FrequencyTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttributeSpec {
    pub name: String,
    /// Source field; defaults to the field named like the attribute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<Field>,
    pub comparator: Comparator,
    pub m_prob: f64,
    pub u_prob: UProb,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange_group: Option<String>,
    #[serde(default)]
    pub partial_floor: f64,
}

impl AttributeSpec {
    pub fn new(name: &str, comparator: Comparator, m_prob: f64, u_prob: f64) -> Self {
        AttributeSpec {
            name: name.to_string(),
            field: None,
            comparator,
            m_prob,
            u_prob: UProb::Fixed(u_prob),
            missing_policy: MissingPolicy::IgnoreRenormalize,
            exchange_group: None,
            partial_floor: 0.0,
        }
    }

    pub fn resolved_field(&self) -> Result<Field, LinkageError> {
        if let Some(f) = self.field {
            return Ok(f);
        }
        serde_json::from_value(serde_json::Value::String(self.name.clone())).or_else(|_| {
            config_err(format!("attribute {:?} names no identity field", self.name))
        })
    }

    pub fn validate(&self) -> Result<(), LinkageError> {
        self.resolved_field()?;
        if !(self.m_prob > 0.0 && self.m_prob < 1.0) {
            return config_err(format!("{}: mProb must be in (0, 1)", self.name));
        }
        match &self.u_prob {
            UProb::Fixed(u) => {
                if !(*u > 0.0 && *u < 1.0) {
                    return config_err(format!("{}: uProb must be in (0, 1)", self.name));
                }
                if self.m_prob <= *u {
                    return config_err(format!("{}: mProb must exceed uProb", self.name));
                }
            }
            UProb::Table(t) => t.validate()?,
        }
        if !(0.0..1.0).contains(&self.partial_floor) && self.partial_floor != 1.0 {
            return config_err(format!("{}: partialFloor must be in [0, 1]", self.name));
        }
        Ok(())
    }

    /// u for the given observed value (tables refine it per value).
    pub fn u_for(&self, observed: Option<&str>) -> f64 {
        match &self.u_prob {
            UProb::Fixed(u) => *u,
            UProb::Table(t) => match observed {
                Some(v) => t.frequency(v),
                None => t.coincidence(),
            },
        }
    }
}

/// `(log2(m/u), log2((1-m)/(1-u)))`.
pub fn agreement_weights(spec: &AttributeSpec, observed: Option<&str>) -> (f64, f64) {
    let m = spec.m_prob;
    let u = spec.u_for(observed).min(1.0 - 1e-12);
    ((m / u).log2(), ((1.0 - m) / (1.0 - u)).log2())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BlockingSpec {
    pub key_parts: Vec<KeyPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub attributes: Vec<AttributeSpec>,
    pub upper_threshold: f64,
    pub lower_threshold: f64,
    #[serde(default)]
    pub blocking: Vec<BlockingSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Encoding parameters for `BLOOM_DICE` attributes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bloom: Option<BloomParams>,
}

impl LinkageConfig {
    pub fn validate(&self) -> Result<(), LinkageError> {
        if self.attributes.is_empty() {
            return config_err("at least one attribute is required");
        }
        if self.lower_threshold > self.upper_threshold {
            return config_err("lowerThreshold exceeds upperThreshold");
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attributes {
            a.validate()?;
            if !names.insert(a.name.as_str()) {
                return config_err(format!("duplicate attribute {:?}", a.name));
            }
            if a.comparator == Comparator::BloomDice && self.bloom.is_none() {
                return config_err(format!("{}: BLOOM_DICE needs bloom parameters", a.name));
            }
        }
        let mut groups: BTreeMap<&str, Vec<&AttributeSpec>> = BTreeMap::new();
        for a in &self.attributes {
            if let Some(g) = &a.exchange_group {
                groups.entry(g).or_default().push(a);
            }
        }
        for (g, members) in groups {
            if members.len() > 6 {
                return config_err(format!("exchange group {g} has more than 6 members"));
            }
            let first = members[0];
            if members
                .iter()
                .any(|m| m.comparator != first.comparator || m.missing_policy != first.missing_policy)
            {
                return config_err(format!(
                    "exchange group {g}: members must share comparator and missing policy"
                ));
            }
        }
        for b in &self.blocking {
            if b.key_parts.is_empty() {
                return config_err("blocking spec without key parts");
            }
            for p in &b.key_parts {
                p.validate()?;
            }
        }
        if let Some(b) = &self.bloom {
            b.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, LinkageError> {
        let cfg: LinkageConfig =
            serde_json::from_str(text).map_err(|e| LinkageError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same configuration with all exchange groups removed.
    pub fn without_exchange_groups(&self) -> Self {
        let mut c = self.clone();
        for a in &mut c.attributes {
            a.exchange_group = None;
        }
        c
    }
}
