use thiserror::Error;

/// Errors raised by the cryptographic building blocks.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("entropy source failure")]
    Entropy,
    #[error("invalid {what} encoding")]
    InvalidEncoding { what: &'static str },
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("inputs differ in length ({left} vs {right} bytes)")]
    LengthMismatch { left: usize, right: usize },
    #[error("message out of order: {0}")]
    ProtocolOrder(&'static str),
    #[error("commitment does not open to the revealed value")]
    CommitmentMismatch,
    #[error("session already aborted")]
    Aborted,
    #[error("proof of correct evaluation rejected")]
    BadProof,
    #[error("authenticated decryption failed")]
    AuthFailure,
    #[error("no catalog entry named {0:?}")]
    NameNotFound(String),
    #[error("catalog cannot be decrypted")]
    CatalogDecrypt,
    #[error("malformed {0}")]
    Malformed(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
