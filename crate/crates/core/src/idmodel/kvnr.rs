//! Statutory health-insurance number (KVNR) plausibility.

use serde::{Deserialize, Serialize};

/// Placeholder codes used by cancer registries for persons without a KVNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErsatzCategory {
    AsylumSeekers,
    PayerUnknown,
    PayerWithoutIk,
    PrivateInsurerUnknown,
    SelfPayers,
}

impl ErsatzCategory {
    pub const ALL: [ErsatzCategory; 5] = [
        ErsatzCategory::AsylumSeekers,
        ErsatzCategory::PayerUnknown,
        ErsatzCategory::PayerWithoutIk,
        ErsatzCategory::PrivateInsurerUnknown,
        ErsatzCategory::SelfPayers,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ErsatzCategory::AsylumSeekers => "970100001",
            ErsatzCategory::PayerUnknown => "970000099",
            ErsatzCategory::PayerWithoutIk => "970001001",
            ErsatzCategory::PrivateInsurerUnknown => "970000022",
            ErsatzCategory::SelfPayers => "970000011",
        }
    }

    /// German label of the insured group.
    pub fn label(self) -> &'static str {
        match self {
            ErsatzCategory::AsylumSeekers => "Asylbewerber:innen",
            ErsatzCategory::PayerUnknown => "Keine Angabe zum Kostenträger",
            ErsatzCategory::PayerWithoutIk => "Kostenträger ohne IK-Nummer",
            ErsatzCategory::PrivateInsurerUnknown => "Privatversichert, Kasse unbekannt",
            ErsatzCategory::SelfPayers => "Selbstzahlende",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KvnrKind {
    Valid,
    Ersatz,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvnrStatus {
    pub kind: KvnrKind,
    pub ersatz_category: Option<ErsatzCategory>,
}

impl KvnrStatus {
    pub fn is_valid(&self) -> bool {
        self.kind == KvnrKind::Valid
    }
}

/// Classifies a KVNR string: one uppercase letter followed by nine digits is
/// `Valid`, an exact replacement code is `Ersatz`, anything else `Invalid`.
/// The check digit is not verified.
pub fn validate_kvnr(s: &str) -> KvnrStatus {
    if let Some(cat) = ErsatzCategory::from_code(s) {
        return KvnrStatus { kind: KvnrKind::Ersatz, ersatz_category: Some(cat) };
    }
    let b = s.as_bytes();
    let valid = b.len() == 10 && b[0].is_ascii_uppercase() && b[1..].iter().all(u8::is_ascii_digit);
    KvnrStatus {
        kind: if valid { KvnrKind::Valid } else { KvnrKind::Invalid },
        ersatz_category: None,
    }
}
