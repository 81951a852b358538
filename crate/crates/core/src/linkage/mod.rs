//! Matching engines: exact, rule-based, deterministic cascade,
//! distance-based and Fellegi–Sunter probabilistic linkage with exchange
//! groups, blocking and three-zone classification.

mod blocking;
mod cascade;
mod config;
mod link;
pub mod presets;
mod rules;
mod score;
mod unique;

use thiserror::Error;

pub use blocking::{block_key, dedup_candidates, generate_candidates, KeyPart, Transform, MISSING};
pub use cascade::{
    deterministic_cascade, read_cascade_records, CascadeRecord, CascadeResult, CascadeStep,
    DiagnosisSource,
};
pub use config::{
    agreement_weights, AttributeSpec, BlockingSpec, Comparator, FrequencyTable, LinkageConfig,
    MissingPolicy, UProb,
};
pub use link::{assign_one_to_one, dedupe, link_datasets, link_within, LinkageResult, ScoredPair};
pub use rules::{rule_based_link, Rule, RulePredicate};
pub use score::{classify, AttributeScore, GroupAssignment, MatchDecision, MatchScore, Scorer, Verdict};
pub use unique::{linked_share, unique_id_link, IdFormat, UniqueIdLinkage, UUID4_RANDOM_BITS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkageError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid identifier {0:?}")]
    InvalidIdentifier(String),
    #[error(transparent)]
    Codec(#[from] crate::pprl::CodecError),
    #[error("input: {0}")]
    Input(String),
}

impl LinkageError {
    pub fn code(&self) -> &'static str {
        match self {
            LinkageError::Config(_) => "CONFIG_ERROR",
            LinkageError::InvalidIdentifier(_) => "INVALID_IDENTIFIER",
            LinkageError::Codec(e) => e.code(),
            LinkageError::Input(_) => "INPUT_ERROR",
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T, LinkageError> {
    Err(LinkageError::Config(msg.into()))
}
