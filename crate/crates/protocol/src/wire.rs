//! Frame layout shared by every link:
//!
//! `version (1) ‖ flow (1) ‖ session_id (16) ‖ type (1) ‖ (u32 BE length ‖ field)*`
//!
//! Each message type has a fixed list of fields (see [`SCHEMA`] and
//! `schema/messages.json`). Fields that do not apply in a given direction are
//! sent empty.

use crate::error::{Error, Result};

pub const WIRE_VERSION: u8 = 1;
pub const SESSION_ID_LEN: usize = 16;
const HEADER_LEN: usize = 3 + SESSION_ID_LEN;

pub type SessionId = [u8; SESSION_ID_LEN];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Flow {
    Enroll = 1,
    Encrypt = 2,
    Decrypt = 3,
    Migrate = 4,
    Recover = 5,
    Refresh = 6,
    Session = 7,
}

impl Flow {
    pub const ALL: [Flow; 7] = [
        Flow::Enroll,
        Flow::Encrypt,
        Flow::Decrypt,
        Flow::Migrate,
        Flow::Recover,
        Flow::Refresh,
        Flow::Session,
    ];

    pub fn from_byte(b: u8) -> Option<Flow> {
        Flow::ALL.into_iter().find(|f| *f as u8 == b)
    }

    pub fn name(self) -> &'static str {
        match self {
            Flow::Enroll => "enroll",
            Flow::Encrypt => "encrypt",
            Flow::Decrypt => "decrypt",
            Flow::Migrate => "migrate",
            Flow::Recover => "recover",
            Flow::Refresh => "refresh",
            Flow::Session => "session",
        }
    }
}

macro_rules! message_types {
    ($($variant:ident = $code:literal, $name:literal, [$($field:literal),*];)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        #[repr(u8)]
        pub enum MsgType {
            $($variant = $code,)*
        }

        /// `(type, wire name, field names)` for every message.
        pub const SCHEMA: &[(MsgType, &str, &[&str])] = &[
            $((MsgType::$variant, $name, &[$($field),*]),)*
        ];
    };
}

message_types! {
    EnrollShares = 0x01, "ENROLL_SHARES",
        ["token", "role", "epoch", "sub_share", "public_key", "catalog_key", "wrapped_catalog_key", "account"];
    SrCommit = 0x02, "SR_COMMIT", ["commitment"];
    SrShare = 0x03, "SR_SHARE", ["share"];
    SrReveal = 0x04, "SR_REVEAL", ["preimage"];
    TprfReq = 0x05, "TPRF_REQ", ["tag", "seed"];
    TprfResp = 0x06, "TPRF_RESP", ["element", "proof"];
    FilePut = 0x07, "FILE_PUT", ["token", "tag", "seed", "record"];
    FileGet = 0x08, "FILE_GET", ["token", "tag"];
    RecoverReq = 0x09, "RECOVER_REQ", ["token", "mode", "which", "device_id", "addr", "identity"];
    AuthPing = 0x0A, "AUTH_PING", ["mode", "which", "device_id", "addr", "identity"];
    AuthApprove = 0x0B, "AUTH_APPROVE", ["decision"];
    ShareRelease = 0x0C, "SHARE_RELEASE",
        ["sub_share", "epoch", "public_key", "catalog_key", "wrapped_catalog_key",
         "peer_device_id", "peer_addr", "peer_identity"];
    RefreshDelta = 0x0D, "REFRESH_DELTA", ["delta", "epoch"];
    SessionInvalidate = 0x0E, "SESSION_INVALIDATE", ["token", "device_id"];
    Ok = 0x10, "OK", [];
    Error = 0x11, "ERROR", ["code", "detail"];
    FileData = 0x12, "FILE_DATA", ["seed", "record"];
    Login = 0x13, "LOGIN", ["account", "password", "device_id", "addr", "identity"];
    Session = 0x14, "SESSION", ["token", "expires_at_ms"];
    FileDelete = 0x15, "FILE_DELETE", ["token", "tag"];
    FileUndelete = 0x16, "FILE_UNDELETE", ["token", "tag"];
    VerifyIdentity = 0x17, "VERIFY_IDENTITY", ["token", "nonce", "mac"];
    VerifyChallenge = 0x18, "VERIFY_CHALLENGE", ["nonce"];
    AccountCreate = 0x19, "ACCOUNT_CREATE", ["account", "password", "recovery_secret"];
    RecoverGrant = 0x1A, "RECOVER_GRANT", ["mode", "which", "device_id", "addr", "identity", "epoch"];
    FileHead = 0x1B, "FILE_HEAD", ["token", "tag"];
    FileMeta = 0x1C, "FILE_META", ["seed"];
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<MsgType> {
        SCHEMA.iter().map(|(t, _, _)| *t).find(|t| *t as u8 == b)
    }

    pub fn name(self) -> &'static str {
        SCHEMA.iter().find(|(t, _, _)| *t == self).unwrap().1
    }

    pub fn fields(self) -> &'static [&'static str] {
        SCHEMA.iter().find(|(t, _, _)| *t == self).unwrap().2
    }
}

/// Recovery request flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RecoveryMode {
    /// The old device is alive and must approve.
    Migrate = 1,
    /// The old device is gone; out-of-band identity verification instead.
    Recover = 2,
}

impl RecoveryMode {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(RecoveryMode::Migrate),
            2 => Ok(RecoveryMode::Recover),
            _ => Err(Error::Malformed("recovery mode".into())),
        }
    }

    pub fn flow(self) -> Flow {
        match self {
            RecoveryMode::Migrate => Flow::Migrate,
            RecoveryMode::Recover => Flow::Recover,
        }
    }
}

/// Answer to an AUTH_PING.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum PingAnswer {
    Deny = 0,
    Approve = 1,
    /// The device is alive but was asked about a recovery, not a migration.
    Alive = 2,
}

impl PingAnswer {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PingAnswer::Deny),
            1 => Ok(PingAnswer::Approve),
            2 => Ok(PingAnswer::Alive),
            _ => Err(Error::Malformed("ping answer".into())),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub flow: Flow,
    pub session: SessionId,
    pub kind: MsgType,
    pub fields: Vec<Vec<u8>>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Field contents can be secret; only sizes are printed.
        let sizes: Vec<usize> = self.fields.iter().map(Vec::len).collect();
        write!(
            f,
            "Frame({} {} session={} fields={:?})",
            self.flow.name(),
            self.kind.name(),
            hex::encode(&self.session[..4]),
            sizes
        )
    }
}

impl Frame {
    /// Builds a frame, checking the field count against the schema.
    pub fn new(flow: Flow, session: SessionId, kind: MsgType, fields: Vec<Vec<u8>>) -> Frame {
        assert_eq!(
            fields.len(),
            kind.fields().len(),
            "{} takes {} fields",
            kind.name(),
            kind.fields().len()
        );
        Frame {
            flow,
            session,
            kind,
            fields,
        }
    }

    pub fn ok(flow: Flow, session: SessionId) -> Frame {
        Frame::new(flow, session, MsgType::Ok, vec![])
    }

    pub fn error(flow: Flow, session: SessionId, e: &Error) -> Frame {
        Frame::new(
            flow,
            session,
            MsgType::Error,
            vec![e.code().to_be_bytes().to_vec(), e.detail().into_bytes()],
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let body: usize = self.fields.iter().map(|f| f.len() + 4).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + body);
        out.push(WIRE_VERSION);
        out.push(self.flow as u8);
        out.extend_from_slice(&self.session);
        out.push(self.kind as u8);
        for f in &self.fields {
            out.extend_from_slice(&(f.len() as u32).to_be_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let bad = |what: &str| Error::Malformed(what.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("short frame"));
        }
        if bytes[0] != WIRE_VERSION {
            return Err(bad("wire version"));
        }
        let flow = Flow::from_byte(bytes[1]).ok_or_else(|| bad("flow"))?;
        let session: SessionId = bytes[2..2 + SESSION_ID_LEN].try_into().unwrap();
        let kind = MsgType::from_byte(bytes[HEADER_LEN - 1]).ok_or_else(|| bad("message type"))?;
        let mut rest = &bytes[HEADER_LEN..];
        let mut fields = Vec::with_capacity(kind.fields().len());
        while !rest.is_empty() {
            if rest.len() < 4 {
                return Err(bad("field length"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            if rest.len() - 4 < len {
                return Err(bad("field body"));
            }
            fields.push(rest[4..4 + len].to_vec());
            rest = &rest[4 + len..];
        }
        if fields.len() != kind.fields().len() {
            return Err(bad("field count"));
        }
        Ok(Frame {
            flow,
            session,
            kind,
            fields,
        })
    }

    /// Field by schema name.
    pub fn field(&self, name: &str) -> &[u8] {
        let i = self
            .kind
            .fields()
            .iter()
            .position(|f| *f == name)
            .unwrap_or_else(|| panic!("{} has no field {name}", self.kind.name()));
        &self.fields[i]
    }

    /// Turns an ERROR frame into the error it carries, and checks any other
    /// frame is of the expected type.
    pub fn expect(self, kind: MsgType) -> Result<Frame> {
        if self.kind == MsgType::Error {
            let code = self.field("code");
            let code = u16::from_be_bytes(
                code.try_into()
                    .map_err(|_| Error::Malformed("error code".into()))?,
            );
            let detail = String::from_utf8_lossy(self.field("detail")).into_owned();
            return Err(Error::from_code(code, detail));
        }
        if self.kind != kind {
            return Err(Error::ProtocolOrder(format!(
                "expected {}, got {}",
                kind.name(),
                self.kind.name()
            )));
        }
        Ok(self)
    }
}

/// Field helpers.
pub fn u32_field(v: u32) -> Vec<u8> {
    v.to_be_bytes().to_vec()
}

pub fn read_u32(bytes: &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_be_bytes(
        bytes
            .try_into()
            .map_err(|_| Error::Malformed(what.to_string()))?,
    ))
}

pub fn read_u64(bytes: &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_be_bytes(
        bytes
            .try_into()
            .map_err(|_| Error::Malformed(what.to_string()))?,
    ))
}

pub fn read_byte(bytes: &[u8], what: &str) -> Result<u8> {
    match bytes {
        [b] => Ok(*b),
        _ => Err(Error::Malformed(what.to_string())),
    }
}

pub fn read_array<const N: usize>(bytes: &[u8], what: &str) -> Result<[u8; N]> {
    bytes
        .try_into()
        .map_err(|_| Error::Malformed(what.to_string()))
}

pub fn read_string(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Malformed(what.to_string()))
}

/// The schema rendered as JSON, in the same shape as `schema/messages.json`.
pub fn schema_json() -> serde_json::Value {
    let messages: Vec<serde_json::Value> = SCHEMA
        .iter()
        .map(|(t, name, fields)| {
            serde_json::json!({
                "name": name,
                "type": format!("0x{:02x}", *t as u8),
                "fields": fields,
            })
        })
        .collect();
    let flows: Vec<serde_json::Value> = Flow::ALL
        .iter()
        .map(|f| serde_json::json!({"name": f.name(), "code": *f as u8}))
        .collect();
    let errors: Vec<serde_json::Value> = (1..=30u16)
        .map(|c| Error::from_code(c, String::new()))
        .map(|e| serde_json::json!({"code": e.code(), "class": e.class()}))
        .collect();
    serde_json::json!({
        "version": WIRE_VERSION,
        "framing": "version(1) | flow(1) | session_id(16) | type(1) | (u32 BE length | field)*",
        "flows": flows,
        "messages": messages,
        "errors": errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_strictness() {
        let f = Frame::new(
            Flow::Decrypt,
            [7; 16],
            MsgType::TprfReq,
            vec![vec![1; 16], vec![2; 32]],
        );
        let bytes = f.encode();
        assert_eq!(bytes[0], 1);
        assert_eq!(bytes[1], 3);
        assert_eq!(bytes[18], 0x05);
        assert_eq!(&bytes[19..23], &[0, 0, 0, 16]);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);

        assert!(Frame::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v[0] = 2;
        assert!(Frame::decode(&v).is_err());
        let mut t = bytes.clone();
        t[18] = 0x7f;
        assert!(Frame::decode(&t).is_err());
        let short = Frame::new(Flow::Decrypt, [7; 16], MsgType::Ok, vec![]).encode();
        let mut wrong_count = short.clone();
        wrong_count[18] = MsgType::TprfReq as u8;
        assert!(Frame::decode(&wrong_count).is_err());
    }

    #[test]
    fn errors_travel_in_frames() {
        for e in [Error::PolicyDenied, Error::NameNotFound("x".into()), Error::BadProof] {
            let frame = Frame::error(Flow::Decrypt, [0; 16], &e);
            let back = Frame::decode(&frame.encode()).unwrap();
            assert_eq!(back.expect(MsgType::TprfResp), Err(e));
        }
        let ok = Frame::ok(Flow::Session, [0; 16]);
        assert!(matches!(ok.expect(MsgType::Session), Err(Error::ProtocolOrder(_))));
    }

    #[test]
    fn type_codes_are_unique() {
        let mut codes: Vec<u8> = SCHEMA.iter().map(|(t, _, _)| *t as u8).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), SCHEMA.len());
    }
}
