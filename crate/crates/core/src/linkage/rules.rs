use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::blocking::KeyPart;
use super::{config_err, LinkageError};
use crate::idmodel::NormalizedIdentity;

/// Exact agreement on one transformed attribute. A value missing on either
/// side never agrees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePredicate {
    pub name: String,
    #[serde(flatten)]
    pub part: KeyPart,
}

impl RulePredicate {
    pub fn new(name: &str, part: KeyPart) -> Self {
        RulePredicate { name: name.to_string(), part }
    }

    pub fn agrees(&self, a: &NormalizedIdentity, b: &NormalizedIdentity) -> bool {
        match (self.part.apply(a), self.part.apply(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }
}

/// "k of n attributes agree, including these".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Rule {
    pub min_agreeing: usize,
    #[serde(default)]
    pub mandatory: BTreeSet<String>,
    pub predicates: Vec<RulePredicate>,
}

impl Rule {
    pub fn validate(&self) -> Result<(), LinkageError> {
        if self.predicates.is_empty() {
            return config_err("rule without predicates");
        }
        if self.min_agreeing > self.predicates.len() {
            return config_err("minAgreeing exceeds the number of predicates");
        }
        for m in &self.mandatory {
            if !self.predicates.iter().any(|p| &p.name == m) {
                return config_err(format!("mandatory attribute {m} has no predicate"));
            }
        }
        for p in &self.predicates {
            p.part.validate()?;
        }
        Ok(())
    }

    /// Names of the predicates on which `a` and `b` agree.
    pub fn agreeing(&self, a: &NormalizedIdentity, b: &NormalizedIdentity) -> Vec<&str> {
        self.predicates.iter().filter(|p| p.agrees(a, b)).map(|p| p.name.as_str()).collect()
    }
}

pub fn rule_based_link(a: &NormalizedIdentity, b: &NormalizedIdentity, rule: &Rule) -> Result<bool, LinkageError> {
    rule.validate()?;
    let agreeing = rule.agreeing(a, b);
    Ok(agreeing.len() >= rule.min_agreeing && rule.mandatory.iter().all(|m| agreeing.contains(&m.as_str())))
}
