use thiserror::Error;

/// Everything a flow can fail with. Each variant has a stable numeric code
/// that travels in ERROR frames and doubles as the CLI's error class.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message out of order: {0}")]
    ProtocolOrder(String),
    #[error("shared randomness aborted: {0}")]
    SrAbort(String),
    #[error("secondary's evaluation proof was rejected")]
    BadProof,
    #[error("request denied by the secondary's approval policy")]
    PolicyDenied,
    #[error("ciphertext failed authentication")]
    AuthFailure,
    #[error("storage service unreachable")]
    CloudUnreachable,
    #[error("peer device unreachable")]
    PeerUnreachable,
    #[error("session token rejected")]
    BadToken,
    #[error("a file with this tag already exists")]
    TagExists,
    #[error("no file with this tag")]
    UnknownTag,
    #[error("account or device already enrolled")]
    DuplicateEnrollment,
    #[error("device is not enrolled")]
    NotEnrolled,
    #[error("the old device denied the migration")]
    ApprovalDenied,
    #[error("the old device did not answer")]
    OldDeviceUnreachable,
    #[error("the old device is still responding; migrate instead")]
    OldDeviceResponded,
    #[error("identity verification failed")]
    VerificationFailed,
    #[error("recovery locked after repeated failed verifications")]
    RecoveryLocked,
    #[error("unknown account")]
    UnknownAccount,
    #[error("wrong account name or password")]
    BadCredentials,
    #[error("no catalog entry named {0:?}")]
    NameNotFound(String),
    #[error("catalog cannot be decrypted")]
    CatalogDecrypt,
    #[error("unknown approval request")]
    UnknownRequest,
    #[error("approval request already decided")]
    AlreadyDecided,
    #[error("entropy source failure")]
    Entropy,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("device state: {0}")]
    State(String),
    #[error("pairing failed: {0}")]
    PairingFailure(String),
    #[error("account already exists")]
    AccountExists,
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn code(&self) -> u16 {
        match self {
            Error::Malformed(_) => 1,
            Error::ProtocolOrder(_) => 2,
            Error::SrAbort(_) => 3,
            Error::BadProof => 4,
            Error::PolicyDenied => 5,
            Error::AuthFailure => 6,
            Error::CloudUnreachable => 7,
            Error::PeerUnreachable => 8,
            Error::BadToken => 9,
            Error::TagExists => 10,
            Error::UnknownTag => 11,
            Error::DuplicateEnrollment => 12,
            Error::NotEnrolled => 13,
            Error::ApprovalDenied => 14,
            Error::OldDeviceUnreachable => 15,
            Error::OldDeviceResponded => 16,
            Error::VerificationFailed => 17,
            Error::RecoveryLocked => 18,
            Error::UnknownAccount => 19,
            Error::BadCredentials => 20,
            Error::NameNotFound(_) => 21,
            Error::CatalogDecrypt => 22,
            Error::UnknownRequest => 23,
            Error::AlreadyDecided => 24,
            Error::Entropy => 25,
            Error::Io(_) => 26,
            Error::State(_) => 27,
            Error::PairingFailure(_) => 28,
            Error::AccountExists => 29,
            Error::Internal(_) => 30,
        }
    }

    /// Kebab-case class name, used in reports and as the CLI's error label.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Malformed(_) => "malformed",
            Error::ProtocolOrder(_) => "protocol-order",
            Error::SrAbort(_) => "sr-abort",
            Error::BadProof => "bad-proof",
            Error::PolicyDenied => "policy-denied",
            Error::AuthFailure => "auth-failure",
            Error::CloudUnreachable => "cloud-unreachable",
            Error::PeerUnreachable => "peer-unreachable",
            Error::BadToken => "bad-token",
            Error::TagExists => "tag-exists",
            Error::UnknownTag => "unknown-tag",
            Error::DuplicateEnrollment => "duplicate-enrollment",
            Error::NotEnrolled => "not-enrolled",
            Error::ApprovalDenied => "approval-denied",
            Error::OldDeviceUnreachable => "old-device-unreachable",
            Error::OldDeviceResponded => "old-device-responded",
            Error::VerificationFailed => "verification-failed",
            Error::RecoveryLocked => "recovery-locked",
            Error::UnknownAccount => "unknown-account",
            Error::BadCredentials => "bad-credentials",
            Error::NameNotFound(_) => "name-not-found",
            Error::CatalogDecrypt => "catalog-decrypt-failure",
            Error::UnknownRequest => "unknown-request",
            Error::AlreadyDecided => "already-decided",
            Error::Entropy => "entropy-failure",
            Error::Io(_) => "io",
            Error::State(_) => "state",
            Error::PairingFailure(_) => "pairing-failure",
            Error::AccountExists => "account-exists",
            Error::Internal(_) => "internal",
        }
    }

    /// Detail string carried next to the code on the wire.
    pub fn detail(&self) -> String {
        match self {
            Error::Malformed(d)
            | Error::ProtocolOrder(d)
            | Error::SrAbort(d)
            | Error::NameNotFound(d)
            | Error::Io(d)
            | Error::State(d)
            | Error::PairingFailure(d)
            | Error::Internal(d) => d.clone(),
            _ => String::new(),
        }
    }

    pub fn from_code(code: u16, detail: String) -> Error {
        match code {
            1 => Error::Malformed(detail),
            2 => Error::ProtocolOrder(detail),
            3 => Error::SrAbort(detail),
            4 => Error::BadProof,
            5 => Error::PolicyDenied,
            6 => Error::AuthFailure,
            7 => Error::CloudUnreachable,
            8 => Error::PeerUnreachable,
            9 => Error::BadToken,
            10 => Error::TagExists,
            11 => Error::UnknownTag,
            12 => Error::DuplicateEnrollment,
            13 => Error::NotEnrolled,
            14 => Error::ApprovalDenied,
            15 => Error::OldDeviceUnreachable,
            16 => Error::OldDeviceResponded,
            17 => Error::VerificationFailed,
            18 => Error::RecoveryLocked,
            19 => Error::UnknownAccount,
            20 => Error::BadCredentials,
            21 => Error::NameNotFound(detail),
            22 => Error::CatalogDecrypt,
            23 => Error::UnknownRequest,
            24 => Error::AlreadyDecided,
            25 => Error::Entropy,
            26 => Error::Io(detail),
            27 => Error::State(detail),
            28 => Error::PairingFailure(detail),
            29 => Error::AccountExists,
            _ => Error::Internal(detail),
        }
    }
}

impl From<twofe_core::Error> for Error {
    fn from(e: twofe_core::Error) -> Self {
        use twofe_core::Error as C;
        match e {
            C::Entropy => Error::Entropy,
            C::BadProof => Error::BadProof,
            C::AuthFailure => Error::AuthFailure,
            C::CommitmentMismatch => Error::SrAbort("commitment does not open".into()),
            C::Aborted => Error::SrAbort("session aborted".into()),
            C::ProtocolOrder(what) => Error::ProtocolOrder(what.into()),
            C::NameNotFound(name) => Error::NameNotFound(name),
            C::CatalogDecrypt => Error::CatalogDecrypt,
            other => Error::Malformed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for code in 1..=30u16 {
            let e = Error::from_code(code, "d".into());
            assert_eq!(e.code(), code);
            assert_eq!(Error::from_code(e.code(), e.detail()), e);
        }
    }
}
