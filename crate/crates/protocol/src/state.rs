//! Device state and its on-disk form.
//!
//! The state file is JSON with secrets hex-encoded, written atomically
//! (temp file + rename) and guarded by an advisory lock on a sidecar
//! `.lock` file so concurrent CLI invocations serialize.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fs2::FileExt;
use serde::{Deserialize, Serialize};
use zeroize::{Zeroize, Zeroizing};

use twofe_core::group::{PrimeGroup, Ristretto255};
use twofe_core::{CatalogKey, Role, ShareSet};

use crate::error::{Error, Result};
use crate::transport::PeerKey;

pub type G = Ristretto255;
pub type Scalar = <G as PrimeGroup>::Scalar;
pub type Element = <G as PrimeGroup>::Element;

pub const STATE_ENV: &str = "TWOFE_STATE";

/// Key material of an enrolled device.
#[derive(Clone)]
pub struct Enrollment {
    pub account: String,
    pub epoch: u32,
    pub shares: ShareSet<G>,
    /// The peer's sub-share deposited with this device.
    pub held: Scalar,
    /// The secondary's public key `k_D·G`.
    pub pk: Element,
    pub catalog_key: CatalogKey,
}

impl Enrollment {
    pub fn role(&self) -> Role {
        self.shares.role
    }
}

impl Drop for Enrollment {
    fn drop(&mut self) {
        self.held.zeroize();
    }
}

impl std::fmt::Debug for Enrollment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Enrollment")
            .field("account", &self.account)
            .field("role", &self.role())
            .field("epoch", &self.epoch)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerInfo {
    pub device_id: String,
    pub addr: String,
    pub identity: PeerKey,
}

#[derive(Clone, Debug)]
pub struct SessionToken {
    pub token: [u8; 32],
    pub expires_at_ms: u64,
}

#[derive(Clone, Debug)]
pub struct DeviceState {
    pub device_id: String,
    pub identity_secret: Zeroizing<[u8; 32]>,
    /// Address this device serves on.
    pub addr: String,
    pub account: Option<String>,
    pub token: Option<SessionToken>,
    pub enrollment: Option<Enrollment>,
    pub peer: Option<PeerInfo>,
    pub cloud: Option<PeerInfo>,
    /// Set once the device approved its own replacement and wiped its shares.
    pub retired: bool,
}

impl DeviceState {
    pub fn new(device_id: &str, addr: &str, identity_secret: [u8; 32]) -> Self {
        DeviceState {
            device_id: device_id.to_owned(),
            identity_secret: Zeroizing::new(identity_secret),
            addr: addr.to_owned(),
            account: None,
            token: None,
            enrollment: None,
            peer: None,
            cloud: None,
            retired: false,
        }
    }

    /// Every scalar this device holds, for adversary-capture checks.
    pub fn scalars(&self) -> Vec<Scalar> {
        match &self.enrollment {
            Some(e) => vec![
                e.shares.own_share,
                e.shares.sub_share_peer,
                e.shares.sub_share_cloud,
                e.held,
            ],
            None => vec![],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PersistedPeer {
    device_id: String,
    addr: String,
    identity: String,
}

#[derive(Serialize, Deserialize)]
struct PersistedEnrollment {
    account: String,
    role: String,
    epoch: u32,
    own_share: String,
    sub_share_peer: String,
    sub_share_cloud: String,
    held_sub_share: String,
    public_key: String,
    catalog_key: String,
}

#[derive(Serialize, Deserialize)]
struct Persisted {
    format: u32,
    device_id: String,
    identity_secret: String,
    addr: String,
    account: Option<String>,
    token: Option<String>,
    token_expires_at_ms: Option<u64>,
    enrollment: Option<PersistedEnrollment>,
    peer: Option<PersistedPeer>,
    cloud: Option<PersistedPeer>,
    retired: bool,
}

impl Drop for Persisted {
    fn drop(&mut self) {
        self.identity_secret.zeroize();
        if let Some(e) = &mut self.enrollment {
            e.own_share.zeroize();
            e.sub_share_peer.zeroize();
            e.sub_share_cloud.zeroize();
            e.held_sub_share.zeroize();
            e.catalog_key.zeroize();
        }
    }
}

const FORMAT: u32 = 1;

fn bad(what: &str) -> Error {
    Error::State(format!("invalid {what}"))
}

fn unhex(s: &str, what: &str) -> Result<Zeroizing<Vec<u8>>> {
    hex::decode(s).map(Zeroizing::new).map_err(|_| bad(what))
}

fn scalar_hex(s: &Scalar) -> String {
    hex::encode(G::encode_scalar(s))
}

fn parse_scalar(s: &str, what: &str) -> Result<Scalar> {
    G::decode_scalar(&unhex(s, what)?).map_err(|_| bad(what))
}

fn role_name(r: Role) -> String {
    match r {
        Role::Primary => "primary".into(),
        Role::Secondary => "secondary".into(),
    }
}

pub fn parse_role(s: &str) -> Result<Role> {
    match s {
        "primary" => Ok(Role::Primary),
        "secondary" => Ok(Role::Secondary),
        _ => Err(Error::Malformed(format!("unknown role {s:?}"))),
    }
}

impl PersistedPeer {
    fn from(p: &PeerInfo) -> Self {
        PersistedPeer {
            device_id: p.device_id.clone(),
            addr: p.addr.clone(),
            identity: p.identity.to_hex(),
        }
    }

    fn parse(&self) -> Result<PeerInfo> {
        Ok(PeerInfo {
            device_id: self.device_id.clone(),
            addr: self.addr.clone(),
            identity: PeerKey::from_hex(&self.identity).map_err(|_| bad("peer identity"))?,
        })
    }
}

pub fn encode_state(st: &DeviceState) -> Zeroizing<String> {
    let p = Persisted {
        format: FORMAT,
        device_id: st.device_id.clone(),
        identity_secret: hex::encode(*st.identity_secret),
        addr: st.addr.clone(),
        account: st.account.clone(),
        token: st.token.as_ref().map(|t| hex::encode(t.token)),
        token_expires_at_ms: st.token.as_ref().map(|t| t.expires_at_ms),
        enrollment: st.enrollment.as_ref().map(|e| PersistedEnrollment {
            account: e.account.clone(),
            role: role_name(e.role()),
            epoch: e.epoch,
            own_share: scalar_hex(&e.shares.own_share),
            sub_share_peer: scalar_hex(&e.shares.sub_share_peer),
            sub_share_cloud: scalar_hex(&e.shares.sub_share_cloud),
            held_sub_share: scalar_hex(&e.held),
            public_key: hex::encode(G::encode_element(&e.pk)),
            catalog_key: hex::encode(e.catalog_key.as_bytes()),
        }),
        peer: st.peer.as_ref().map(PersistedPeer::from),
        cloud: st.cloud.as_ref().map(PersistedPeer::from),
        retired: st.retired,
    };
    Zeroizing::new(serde_json::to_string_pretty(&p).expect("state serializes"))
}

pub fn decode_state(text: &str) -> Result<DeviceState> {
    let p: Persisted =
        serde_json::from_str(text).map_err(|e| Error::State(format!("state file: {e}")))?;
    if p.format != FORMAT {
        return Err(Error::State(format!("unsupported state format {}", p.format)));
    }
    let identity_secret: [u8; 32] = unhex(&p.identity_secret, "identity secret")?
        .as_slice()
        .try_into()
        .map_err(|_| bad("identity secret"))?;
    let token = match (&p.token, p.token_expires_at_ms) {
        (Some(t), Some(exp)) => Some(SessionToken {
            token: unhex(t, "token")?
                .as_slice()
                .try_into()
                .map_err(|_| bad("token"))?,
            expires_at_ms: exp,
        }),
        _ => None,
    };
    let enrollment = match &p.enrollment {
        None => None,
        Some(e) => {
            let shares = ShareSet {
                role: parse_role(&e.role)?,
                own_share: parse_scalar(&e.own_share, "own share")?,
                sub_share_peer: parse_scalar(&e.sub_share_peer, "peer sub-share")?,
                sub_share_cloud: parse_scalar(&e.sub_share_cloud, "cloud sub-share")?,
            };
            if !shares.is_consistent() {
                return Err(bad("share split"));
            }
            Some(Enrollment {
                account: e.account.clone(),
                epoch: e.epoch,
                shares,
                held: parse_scalar(&e.held_sub_share, "held sub-share")?,
                pk: G::decode_element(&unhex(&e.public_key, "public key")?)
                    .map_err(|_| bad("public key"))?,
                catalog_key: CatalogKey::from_slice(&unhex(&e.catalog_key, "catalog key")?)
                    .map_err(|_| bad("catalog key"))?,
            })
        }
    };
    Ok(DeviceState {
        device_id: p.device_id.clone(),
        identity_secret: Zeroizing::new(identity_secret),
        addr: p.addr.clone(),
        account: p.account.clone(),
        token,
        enrollment,
        peer: p.peer.as_ref().map(PersistedPeer::parse).transpose()?,
        cloud: p.cloud.as_ref().map(PersistedPeer::parse).transpose()?,
        retired: p.retired,
    })
}

/// Location of a device's state file.
#[derive(Clone, Debug)]
pub struct StateFile {
    path: PathBuf,
}

/// Exclusive hold on a state file for the lifetime of the value.
pub struct StateLock {
    file: File,
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs2::FileExt::unlock(&self.file);
    }
}

impl StateFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        StateFile { path: path.into() }
    }

    /// `$TWOFE_STATE` if set, else `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(STATE_ENV) {
            Some(p) => StateFile::new(p),
            None => StateFile::new(default),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    fn lock_path(&self) -> PathBuf {
        let mut p = self.path.clone().into_os_string();
        p.push(".lock");
        PathBuf::from(p)
    }

    fn lock_file(&self) -> Result<File> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.lock_path())?)
    }

    /// Blocks until no other process holds the state.
    pub fn lock(&self) -> Result<StateLock> {
        let file = self.lock_file()?;
        file.lock_exclusive()?;
        Ok(StateLock { file })
    }

    /// Fails immediately if another process holds the state.
    pub fn try_lock(&self) -> Result<StateLock> {
        let file = self.lock_file()?;
        file.try_lock_exclusive()
            .map_err(|_| Error::State("state file is locked by another process".into()))?;
        Ok(StateLock { file })
    }

    pub fn load(&self) -> Result<DeviceState> {
        let text = Zeroizing::new(
            fs::read_to_string(&self.path)
                .map_err(|e| Error::State(format!("{}: {e}", self.path.display())))?,
        );
        decode_state(&text)
    }

    /// Writes atomically. Callers coordinate through [`StateFile::lock`].
    pub fn store(&self, st: &DeviceState) -> Result<()> {
        let text = encode_state(st);
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut opts = OpenOptions::new();
            opts.create(true).write(true).truncate(true);
            #[cfg(unix)]
            {
                use std::os::unix::fs::OpenOptionsExt;
                opts.mode(0o600);
            }
            let mut f = opts.open(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}
