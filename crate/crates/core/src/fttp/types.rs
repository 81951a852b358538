use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::idmodel::IdentityRecord;
use crate::pprl::BloomParams;
use crate::pseudonym::TokenFormat;
use crate::store::SealedBlob;

/// Authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", rename_all_fields = "camelCase")]
pub enum Principal {
    Site { site_id: String },
    Hub,
    ClearingActor { name: String },
    Admin,
}

impl Principal {
    pub fn site(id: &str) -> Self {
        Principal::Site { site_id: id.into() }
    }

    pub fn clearing(name: &str) -> Self {
        Principal::ClearingActor { name: name.into() }
    }

    pub fn site_id(&self) -> Option<&str> {
        match self {
            Principal::Site { site_id } => Some(site_id),
            _ => None,
        }
    }

    /// Parses `site:<id>`, `hub`, `clearing:<name>` or `admin`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.split_once(':') {
            Some(("site", id)) if !id.is_empty() => Some(Principal::site(id)),
            Some(("clearing", n)) if !n.is_empty() => Some(Principal::clearing(n)),
            None if s == "hub" => Some(Principal::Hub),
            None if s == "admin" => Some(Principal::Admin),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Principal::Site { site_id } => format!("site:{site_id}"),
            Principal::Hub => "hub".into(),
            Principal::ClearingActor { name } => format!("clearing:{name}"),
            Principal::Admin => "admin".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FttpConfig {
    /// Parameters every site must encode with.
    pub bloom: BloomParams,
    /// Dice at or above this merges automatically.
    pub upper_threshold: f64,
    /// Dice below this is a non-match.
    pub lower_threshold: f64,
    /// Secret behind DIZ and cross-site pseudonyms.
    pub hub_key_id: String,
    #[serde(default)]
    pub format: TokenFormat,
}

impl FttpConfig {
    pub fn default_preset() -> Self {
        serde_json::from_str(include_str!("../../data/presets/fttp-default.json")).expect("bundled preset parses")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatchKind {
    PerfectMatch,
    AutomaticMerge,
    PossibleMatch,
    NonMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub kind: MatchKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubmissionMessage {
    pub tx_id: String,
    pub site_id: String,
    /// Wire form of a [`crate::pprl::BloomEncoding`].
    pub encoding: String,
    pub consent_ref: String,
}

/// What the submitting site learns. Nothing about other sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubmitResponse {
    pub tx_id: String,
    pub diz_pseudonym: String,
    pub outcome: MatchOutcome,
    pub clearing_pending: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConsentStatus {
    Active,
    Withdrawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsentRecord {
    pub consent_id: String,
    pub site_id: String,
    pub subject_ref: String,
    pub status: ConsentStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub withdrawn_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseStatus {
    Open,
    AwaitingPlaintext,
    ResolvedMerge,
    ResolvedSeparate,
    Void,
}

impl CaseStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, CaseStatus::ResolvedMerge | CaseStatus::ResolvedSeparate | CaseStatus::Void)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClearingVerdict {
    Merge,
    Separate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaseNote {
    pub ts: DateTime<Utc>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlaintextSlot {
    pub site_id: String,
    pub diz: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plaintext: Option<SealedBlob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClearingCase {
    pub case_id: String,
    /// Internal entry ids; the older entry first.
    pub involved: Vec<u64>,
    pub slots: Vec<PlaintextSlot>,
    pub status: CaseStatus,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_by: Option<String>,
    pub audit: Vec<CaseNote>,
    pub version: u64,
    pub opened_at: DateTime<Utc>,
}

impl ClearingCase {
    pub fn all_filled(&self) -> bool {
        self.slots.iter().all(|s| s.plaintext.is_some())
    }

    pub fn sites(&self) -> BTreeSet<&str> {
        self.slots.iter().map(|s| s.site_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SlotView {
    pub site_id: String,
    pub diz_pseudonym: String,
    pub filled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityRecord>,
}

/// External form of a clearing case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaseView {
    pub case_id: String,
    pub status: CaseStatus,
    pub score: f64,
    pub version: u64,
    pub resolvable: bool,
    pub slots: Vec<SlotView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_by: Option<String>,
    pub audit: Vec<CaseNote>,
    pub opened_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeletionReport {
    pub consent_id: String,
    pub tombstone: String,
    pub removed_encodings: usize,
    pub invalidated_pseudonyms: usize,
    pub removed_entries: usize,
    pub voided_cases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", rename_all_fields = "camelCase")]
pub enum Recipient {
    Site { site_id: String },
    Hub,
    Clearing,
}

impl Recipient {
    pub fn site(id: &str) -> Self {
        Recipient::Site { site_id: id.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE", rename_all_fields = "camelCase")]
pub enum MessageBody {
    SubmissionResult { response: SubmitResponse },
    CaseOpened { case_id: String },
    PlaintextRequest { case_id: String, diz_pseudonyms: Vec<String> },
    CaseResolved { case_id: String, verdict: ClearingVerdict },
    CaseVoided { case_id: String },
    DeletionNotice { consent_id: String, diz_pseudonyms: Vec<String> },
    Translation { diz_pseudonym: String, cross_site_pseudonym: String },
}

/// Protocol message; `seq` is the journal sequence number that caused it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub to: Recipient,
    pub body: MessageBody,
}
