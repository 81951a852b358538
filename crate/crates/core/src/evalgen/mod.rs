//! Synthetic identity corpora with controlled corruption, and pairwise
//! linkage-quality evaluation against the known truth.

mod corpus;
mod corrupt;
mod evaluate;

use thiserror::Error;

pub use corpus::{
    demo_corpus, DEMO_SEED, generate_corpus, read_truth, write_truth, Corpus, GroundTruth, NameLists, RecordsPerEntity,
};
pub use corrupt::{corrupt, CorruptionConfig, TypoKind};
pub use evaluate::{evaluate, evaluate_subset, CandidateUniverse, LinkageReport, Prediction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record {0:?} is not in the ground truth")]
    UnknownRecord(String),
    #[error("{0} must be within [0, 1]")]
    InvalidRate(&'static str),
    #[error("invalid corpus request: {0}")]
    InvalidRequest(String),
    #[error("truth file line {line}: {msg}")]
    Truth { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::UnknownRecord(_) => "UNKNOWN_RECORD",
            EvalError::InvalidRate(_) | EvalError::InvalidRequest(_) => "CONFIG_ERROR",
            EvalError::Truth { .. } | EvalError::Csv(_) => "INPUT_ERROR",
        }
    }
}
