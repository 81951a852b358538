//! Privacy-preserving encodings: keyed q-gram Bloom filters with optional
//! balanced hardening, and two-stage control numbers.

mod bloom;
mod control;
mod keys;

use thiserror::Error;

pub use bloom::{
    dice_similarity, qgram_dice, qgrams, BitVector, BloomEncoder, BloomEncoding, BloomParams,
    Hardening,
};
pub use control::{
    derive_control_numbers, ControlNumberSet, Stage, Token, CONTROL_COMPONENTS, EMPTY_TOKEN,
    TOKEN_WIDTH,
};
pub use keys::{hmac_sha256, KeyRing, Secret};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("key {0:?} not found")]
    KeyNotFound(String),
    #[error("encoding parameters differ")]
    ParamsMismatch,
    #[error("expected stage {expected:?}, got {found:?}")]
    Stage { expected: Stage, found: Stage },
    #[error("integrity check failed: wrong key")]
    WrongKey,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("nothing to encode")]
    EmptyFields,
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error("key file: {0}")]
    KeyFile(String),
}

impl CodecError {
    pub fn code(&self) -> &'static str {
        match self {
            CodecError::KeyNotFound(_) => "KEY_NOT_FOUND",
            CodecError::ParamsMismatch => "PARAMS_MISMATCH",
            CodecError::Stage { .. } => "STAGE_ERROR",
            CodecError::WrongKey => "WRONG_KEY",
            CodecError::InvalidParams(_) => "INVALID_PARAMS",
            CodecError::EmptyFields => "EMPTY_FIELDS",
            CodecError::Malformed(_) => "MALFORMED",
            CodecError::KeyFile(_) => "KEY_FILE",
        }
    }
}
