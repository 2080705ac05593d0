//! The storage service.
//!
//! It stores ciphertexts and seeds by tag, keeps each device's cloud
//! sub-share in a vault, issues session tokens, and brokers device
//! replacement: it asks the old device for approval (migration) or runs the
//! identity-verification stub (recovery), then releases exactly one vault
//! scalar to the new device and tells the surviving device to release its
//! sub-share too. It never sees enough to reconstruct the master key.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use hmac::{Hmac, Mac};
use rand_core::{OsRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;

use twofe_core::file_crypto::{CATALOG_TAG, CATALOG_WRAP_TAG, SEED_LEN};
use twofe_core::group::{frame_parts, PrimeGroup};
use twofe_core::{FileTag, Role};

use crate::approval::REQUEST_EXPIRY;
use crate::clock::{ms, Clock};
use crate::error::{Error, Result};
use crate::state::{Scalar, G};
use crate::store::{BlobStore, Journal};
use crate::transport::{Caller, Dialer, Endpoint, PeerKey};
use crate::wire::{
    read_array, read_byte, read_string, read_u32, u32_field, Frame, MsgType, PingAnswer,
    RecoveryMode,
};

#[derive(Clone, Debug)]
pub struct CloudConfig {
    /// Argon2id memory cost (KiB), iterations, lanes.
    pub argon2: (u32, u32, u32),
    pub token_ttl: Duration,
    pub trash_window: Duration,
    /// How long a recovery waits for the old device before falling back to
    /// identity verification.
    pub liveness_timeout: Duration,
    /// How long a migration waits for the user on the old device.
    pub approval_timeout: Duration,
    pub max_failures: u32,
    pub lockout: Duration,
    pub challenge_ttl: Duration,
    pub snapshot_every: usize,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            argon2: (19 * 1024, 2, 1),
            token_ttl: Duration::from_secs(12 * 3600),
            trash_window: Duration::from_secs(30 * 24 * 3600),
            liveness_timeout: Duration::from_secs(60),
            approval_timeout: REQUEST_EXPIRY + Duration::from_secs(10),
            max_failures: 3,
            lockout: Duration::from_secs(3600),
            challenge_ttl: Duration::from_secs(600),
            snapshot_every: 1000,
        }
    }
}

impl CloudConfig {
    /// Cheap password hashing for tests and simulations.
    pub fn fast() -> Self {
        CloudConfig {
            argon2: (64, 1, 1),
            ..CloudConfig::default()
        }
    }
}

/// `HMAC(recovery_secret, nonce ‖ account ‖ role ‖ new device)`: the
/// identity-verification proof, bound to the device that will receive the
/// released share.
pub fn identity_proof(
    recovery_secret: &[u8],
    nonce: &[u8; 32],
    account: &str,
    which: Role,
    device_id: &str,
    identity: &PeerKey,
) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(recovery_secret).expect("any key length");
    mac.update(&frame_parts(
        b"2FE-VERIFY",
        [
            &nonce[..],
            account.as_bytes(),
            &[which.as_byte()],
            device_id.as_bytes(),
            &identity.0,
        ],
    ));
    mac.finalize().into_bytes().into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
struct DeviceEntry {
    addr: String,
    identity: String,
    role: Option<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Vault {
    epoch: u32,
    #[serde(with = "hex::serde")]
    primary: Vec<u8>,
    #[serde(with = "hex::serde")]
    secondary: Vec<u8>,
    #[serde(with = "hex::serde")]
    wrapped_catalog_key: Vec<u8>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Staged {
    primary: Option<String>,
    secondary: Option<String>,
    wrapped_catalog_key: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileMeta {
    #[serde(with = "hex::serde")]
    seed: Vec<u8>,
    uploaded_at_ms: u64,
    deleted_at_ms: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Account {
    verifier: String,
    #[serde(with = "hex::serde")]
    recovery_secret: Vec<u8>,
    devices: BTreeMap<String, DeviceEntry>,
    vault: Option<Vault>,
    staged: BTreeMap<u32, Staged>,
    files: BTreeMap<String, FileMeta>,
    /// Tags purged from the trash; never reused.
    #[serde(default)]
    purged: BTreeSet<String>,
    /// Every sub-share ever deposited: `(epoch, role, hex)`.
    history: BTreeSet<(u32, u8, String)>,
    failures: u32,
    locked_until_ms: u64,
    /// `(role, epoch, new device)` for each release.
    releases: BTreeSet<(u8, u32, String)>,
}

impl Account {
    fn device_with_role(&self, role: Role) -> Option<(&String, &DeviceEntry)> {
        self.devices
            .iter()
            .find(|(_, d)| d.role == Some(role.as_byte()))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Db {
    accounts: BTreeMap<String, Account>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
enum Event {
    AccountCreated {
        account: String,
        verifier: String,
        recovery_secret: String,
    },
    DeviceSeen {
        account: String,
        device_id: String,
        addr: String,
        identity: String,
    },
    Deposited {
        account: String,
        device_id: String,
        role: u8,
        epoch: u32,
        sub_share: String,
        wrapped_catalog_key: Option<String>,
    },
    FileStored {
        account: String,
        tag: String,
        seed: String,
        at_ms: u64,
    },
    FileDeleted {
        account: String,
        tag: String,
        at_ms: u64,
    },
    FileRestored {
        account: String,
        tag: String,
    },
    FilePurged {
        account: String,
        tag: String,
    },
    VerificationFailed {
        account: String,
        failures: u32,
        locked_until_ms: u64,
    },
    VerificationPassed {
        account: String,
    },
    DeviceReplaced {
        account: String,
        role: u8,
        epoch: u32,
        device_id: String,
        addr: String,
        identity: String,
    },
}

fn unhex(s: &str) -> Vec<u8> {
    hex::decode(s).expect("journal holds valid hex")
}

impl Db {
    /// Folds one event into the state. Events are validated before they are
    /// journaled, so applying them cannot fail; applying twice is harmless.
    fn apply(&mut self, e: &Event) {
        if let Event::AccountCreated {
            account,
            verifier,
            recovery_secret,
        } = e
        {
            self.accounts.entry(account.clone()).or_insert(Account {
                verifier: verifier.clone(),
                recovery_secret: unhex(recovery_secret),
                devices: BTreeMap::new(),
                vault: None,
                staged: BTreeMap::new(),
                files: BTreeMap::new(),
                history: BTreeSet::new(),
                purged: BTreeSet::new(),
                failures: 0,
                locked_until_ms: 0,
                releases: BTreeSet::new(),
            });
            return;
        }
        let Some(acct) = self.accounts.get_mut(event_account(e)) else {
            return;
        };
        match e {
            Event::AccountCreated { .. } => {}
            Event::DeviceSeen {
                device_id,
                addr,
                identity,
                ..
            } => {
                let entry = acct
                    .devices
                    .entry(device_id.clone())
                    .or_insert(DeviceEntry {
                        addr: String::new(),
                        identity: String::new(),
                        role: None,
                    });
                entry.addr = addr.clone();
                entry.identity = identity.clone();
            }
            Event::Deposited {
                device_id,
                role,
                epoch,
                sub_share,
                wrapped_catalog_key,
                ..
            } => {
                if let Some(d) = acct.devices.get_mut(device_id) {
                    d.role = Some(*role);
                }
                acct.history.insert((*epoch, *role, sub_share.clone()));
                let staged = acct.staged.entry(*epoch).or_default();
                if *role == Role::Primary.as_byte() {
                    staged.primary = Some(sub_share.clone());
                } else {
                    staged.secondary = Some(sub_share.clone());
                }
                if wrapped_catalog_key.is_some() {
                    staged.wrapped_catalog_key = wrapped_catalog_key.clone();
                }
                if let (Some(p), Some(s)) = (&staged.primary, &staged.secondary) {
                    let wrapped = staged
                        .wrapped_catalog_key
                        .as_deref()
                        .map(unhex)
                        .or_else(|| acct.vault.as_ref().map(|v| v.wrapped_catalog_key.clone()))
                        .unwrap_or_default();
                    acct.vault = Some(Vault {
                        epoch: *epoch,
                        primary: unhex(p),
                        secondary: unhex(s),
                        wrapped_catalog_key: wrapped,
                    });
                    acct.staged.retain(|k, _| k > epoch);
                }
            }
            Event::FileStored {
                tag, seed, at_ms, ..
            } => {
                acct.files.insert(
                    tag.clone(),
                    FileMeta {
                        seed: unhex(seed),
                        uploaded_at_ms: *at_ms,
                        deleted_at_ms: None,
                    },
                );
            }
            Event::FileDeleted { tag, at_ms, .. } => {
                if let Some(f) = acct.files.get_mut(tag) {
                    f.deleted_at_ms.get_or_insert(*at_ms);
                }
            }
            Event::FileRestored { tag, .. } => {
                if let Some(f) = acct.files.get_mut(tag) {
                    f.deleted_at_ms = None;
                }
            }
            Event::FilePurged { tag, .. } => {
                acct.files.remove(tag);
                acct.purged.insert(tag.clone());
            }
            Event::VerificationFailed {
                failures,
                locked_until_ms,
                ..
            } => {
                acct.failures = *failures;
                acct.locked_until_ms = *locked_until_ms;
            }
            Event::VerificationPassed { .. } => {
                acct.failures = 0;
            }
            Event::DeviceReplaced {
                role,
                epoch,
                device_id,
                addr,
                identity,
                ..
            } => {
                for d in acct.devices.values_mut() {
                    if d.role == Some(*role) {
                        d.role = None;
                    }
                }
                acct.devices.insert(
                    device_id.clone(),
                    DeviceEntry {
                        addr: addr.clone(),
                        identity: identity.clone(),
                        role: Some(*role),
                    },
                );
                acct.releases.insert((*role, *epoch, device_id.clone()));
            }
        }
    }
}

fn event_account(e: &Event) -> &str {
    match e {
        Event::AccountCreated { account, .. }
        | Event::DeviceSeen { account, .. }
        | Event::Deposited { account, .. }
        | Event::FileStored { account, .. }
        | Event::FileDeleted { account, .. }
        | Event::FileRestored { account, .. }
        | Event::FilePurged { account, .. }
        | Event::VerificationFailed { account, .. }
        | Event::VerificationPassed { account }
        | Event::DeviceReplaced { account, .. } => account,
    }
}

#[derive(Clone, Debug)]
struct TokenInfo {
    account: String,
    device_id: String,
    identity: PeerKey,
    expires_at_ms: u64,
}

#[derive(Clone, Debug)]
struct Binding {
    account: String,
    which: Role,
    device_id: String,
    addr: String,
    identity: PeerKey,
}

struct Challenge {
    binding: Binding,
    expires_at_ms: u64,
}

/// What the cloud has been told about a replacement, for tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaultView {
    pub epoch: u32,
    pub primary: Scalar,
    pub secondary: Scalar,
    pub wrapped_catalog_key: Vec<u8>,
}

pub struct Cloud {
    config: CloudConfig,
    clock: Arc<dyn Clock>,
    dialer: Arc<dyn Dialer>,
    db: Mutex<Db>,
    journal: Option<Journal>,
    since_snapshot: AtomicUsize,
    blobs: Arc<dyn BlobStore>,
    tokens: Mutex<HashMap<[u8; 32], TokenInfo>>,
    challenges: Mutex<HashMap<[u8; 32], Challenge>>,
    uploads: Mutex<HashSet<(String, String)>>,
}

impl Cloud {
    /// A cloud without durable account state.
    pub fn new(
        config: CloudConfig,
        clock: Arc<dyn Clock>,
        dialer: Arc<dyn Dialer>,
        blobs: Arc<dyn BlobStore>,
    ) -> Arc<Cloud> {
        Arc::new(Self::build(config, clock, dialer, blobs, Db::default(), None))
    }

    /// A cloud whose accounts are journaled under `dir`.
    pub fn open(
        config: CloudConfig,
        clock: Arc<dyn Clock>,
        dialer: Arc<dyn Dialer>,
        blobs: Arc<dyn BlobStore>,
        dir: &std::path::Path,
    ) -> Result<Arc<Cloud>> {
        let (journal, snapshot, events) = Journal::open::<Db, Event>(dir)?;
        let mut db = snapshot.unwrap_or_default();
        for e in &events {
            db.apply(e);
        }
        Ok(Arc::new(Self::build(
            config,
            clock,
            dialer,
            blobs,
            db,
            Some(journal),
        )))
    }

    fn build(
        config: CloudConfig,
        clock: Arc<dyn Clock>,
        dialer: Arc<dyn Dialer>,
        blobs: Arc<dyn BlobStore>,
        db: Db,
        journal: Option<Journal>,
    ) -> Cloud {
        Cloud {
            config,
            clock,
            dialer,
            db: Mutex::new(db),
            journal,
            since_snapshot: AtomicUsize::new(0),
            blobs,
            tokens: Mutex::new(HashMap::new()),
            challenges: Mutex::new(HashMap::new()),
            uploads: Mutex::new(HashSet::new()),
        }
    }

    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Journals and applies an event while the caller holds the db lock.
    fn commit(&self, db: &mut Db, e: Event) -> Result<()> {
        if let Some(j) = &self.journal {
            j.append(&e)?;
        }
        db.apply(&e);
        if let Some(j) = &self.journal {
            if self.since_snapshot.fetch_add(1, Ordering::SeqCst) + 1 >= self.config.snapshot_every {
                self.since_snapshot.store(0, Ordering::SeqCst);
                j.snapshot(&*db)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<()> {
        if let Some(j) = &self.journal {
            let db = self.db.lock().unwrap();
            j.snapshot(&*db)?;
            self.since_snapshot.store(0, Ordering::SeqCst);
        }
        Ok(())
    }

    fn argon2(&self) -> Argon2<'static> {
        let (m, t, p) = self.config.argon2;
        Argon2::new(
            Algorithm::Argon2id,
            Version::V0x13,
            Params::new(m, t, p, None).expect("valid argon2 parameters"),
        )
    }

    fn session(&self, token: &[u8], caller: &Caller) -> Result<TokenInfo> {
        let token: [u8; 32] = token.try_into().map_err(|_| Error::BadToken)?;
        let tokens = self.tokens.lock().unwrap();
        let info = tokens.get(&token).ok_or(Error::BadToken)?;
        if info.expires_at_ms <= self.now() || info.identity != caller.identity {
            return Err(Error::BadToken);
        }
        Ok(info.clone())
    }

    fn blob_key(account: &str, tag: &str) -> String {
        format!("{}/{tag}", hex::encode(account.as_bytes()))
    }

    // ---- inspection, used by tests and scenario checks ----

    /// Current vault contents.
    pub fn vault(&self, account: &str) -> Option<VaultView> {
        let db = self.db.lock().unwrap();
        let v = db.accounts.get(account)?.vault.as_ref()?;
        Some(VaultView {
            epoch: v.epoch,
            primary: G::decode_scalar(&v.primary).ok()?,
            secondary: G::decode_scalar(&v.secondary).ok()?,
            wrapped_catalog_key: v.wrapped_catalog_key.clone(),
        })
    }

    /// Every scalar the cloud has ever been given for `account`.
    pub fn seen_scalars(&self, account: &str) -> Vec<Scalar> {
        let db = self.db.lock().unwrap();
        db.accounts
            .get(account)
            .map(|a| {
                a.history
                    .iter()
                    .filter_map(|(_, _, s)| G::decode_scalar(&unhex(s)).ok())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Number of vault scalars released so far.
    pub fn releases(&self, account: &str) -> usize {
        let db = self.db.lock().unwrap();
        db.accounts.get(account).map_or(0, |a| a.releases.len())
    }

    pub fn file_count(&self, account: &str) -> usize {
        let db = self.db.lock().unwrap();
        db.accounts.get(account).map_or(0, |a| {
            a.files
                .keys()
                .filter(|t| **t != CATALOG_TAG.to_hex() && **t != CATALOG_WRAP_TAG.to_hex())
                .count()
        })
    }

    /// Device holding `role`, as `(device_id, identity)`.
    pub fn device_for(&self, account: &str, role: Role) -> Option<(String, PeerKey)> {
        let db = self.db.lock().unwrap();
        let (id, d) = db.accounts.get(account)?.device_with_role(role)?;
        Some((id.clone(), PeerKey::from_hex(&d.identity).ok()?))
    }

    /// Drops trashed files older than the trash window.
    pub fn purge_expired(&self) -> Result<usize> {
        let cutoff = self.now().saturating_sub(ms(self.config.trash_window));
        let mut db = self.db.lock().unwrap();
        let doomed: Vec<(String, String)> = db
            .accounts
            .iter()
            .flat_map(|(a, acct)| {
                acct.files
                    .iter()
                    .filter(|(_, f)| f.deleted_at_ms.is_some_and(|d| d <= cutoff))
                    .map(move |(t, _)| (a.clone(), t.clone()))
            })
            .collect();
        for (account, tag) in &doomed {
            self.commit(
                &mut db,
                Event::FilePurged {
                    account: account.clone(),
                    tag: tag.clone(),
                },
            )?;
            self.blobs.delete(&Self::blob_key(account, tag))?;
        }
        Ok(doomed.len())
    }

    // ---- request handlers ----

    fn account_create(&self, f: &Frame) -> Result<Frame> {
        let account = read_string(f.field("account"), "account")?;
        if account.is_empty() || account.len() > 256 {
            return Err(Error::Malformed("account name".into()));
        }
        let password = f.field("password");
        let secret = f.field("recovery_secret");
        if secret.len() < 16 {
            return Err(Error::Malformed("recovery secret shorter than 16 bytes".into()));
        }
        if self.db.lock().unwrap().accounts.contains_key(&account) {
            return Err(Error::AccountExists);
        }
        let salt = SaltString::generate(&mut OsRng);
        let verifier = self
            .argon2()
            .hash_password(password, &salt)
            .map_err(|e| Error::Internal(format!("password hashing: {e}")))?
            .to_string();
        let mut db = self.db.lock().unwrap();
        if db.accounts.contains_key(&account) {
            return Err(Error::AccountExists);
        }
        self.commit(
            &mut db,
            Event::AccountCreated {
                account,
                verifier,
                recovery_secret: hex::encode(secret),
            },
        )?;
        Ok(Frame::ok(f.flow, f.session))
    }

    fn login(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let account = read_string(f.field("account"), "account")?;
        let device_id = read_string(f.field("device_id"), "device id")?;
        let addr = read_string(f.field("addr"), "address")?;
        let identity = PeerKey::from_slice(f.field("identity"))?;
        if identity != caller.identity || device_id.is_empty() {
            return Err(Error::BadCredentials);
        }
        let verifier = {
            let db = self.db.lock().unwrap();
            let acct = db.accounts.get(&account).ok_or(Error::UnknownAccount)?;
            // A device id stays bound to the identity that first used it.
            if let Some(d) = acct.devices.get(&device_id) {
                if d.identity != identity.to_hex() {
                    return Err(Error::BadCredentials);
                }
            }
            acct.verifier.clone()
        };
        let parsed = PasswordHash::new(&verifier)
            .map_err(|_| Error::Internal("stored verifier is corrupt".into()))?;
        self.argon2()
            .verify_password(f.field("password"), &parsed)
            .map_err(|_| Error::BadCredentials)?;
        {
            let mut db = self.db.lock().unwrap();
            let known = db.accounts[&account].devices.get(&device_id).cloned();
            let wanted = DeviceEntry {
                addr: addr.clone(),
                identity: identity.to_hex(),
                role: known.as_ref().and_then(|d| d.role),
            };
            if known.as_ref() != Some(&wanted) {
                self.commit(
                    &mut db,
                    Event::DeviceSeen {
                        account: account.clone(),
                        device_id: device_id.clone(),
                        addr,
                        identity: identity.to_hex(),
                    },
                )?;
            }
        }
        let mut token = [0u8; 32];
        OsRng.fill_bytes(&mut token);
        let expires_at_ms = self.now() + ms(self.config.token_ttl);
        self.tokens.lock().unwrap().insert(
            token,
            TokenInfo {
                account,
                device_id,
                identity,
                expires_at_ms,
            },
        );
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::Session,
            vec![token.to_vec(), expires_at_ms.to_be_bytes().to_vec()],
        ))
    }

    fn invalidate(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let me = self.session(f.field("token"), caller)?;
        let target = read_string(f.field("device_id"), "device id")?;
        self.tokens
            .lock()
            .unwrap()
            .retain(|_, t| !(t.account == me.account && t.device_id == target));
        Ok(Frame::ok(f.flow, f.session))
    }

    fn deposit(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let me = self.session(f.field("token"), caller)?;
        let role = Role::from_byte(read_byte(f.field("role"), "role")?)
            .ok_or_else(|| Error::Malformed("role".into()))?;
        let epoch = read_u32(f.field("epoch"), "epoch")?;
        G::decode_scalar(f.field("sub_share"))?;
        let wrapped = f.field("wrapped_catalog_key");
        let mut db = self.db.lock().unwrap();
        let acct = db.accounts.get(&me.account).ok_or(Error::UnknownAccount)?;
        let mine = acct.devices.get(&me.device_id).and_then(|d| d.role);
        match acct.device_with_role(role) {
            Some((id, _)) if *id != me.device_id => return Err(Error::DuplicateEnrollment),
            _ => {}
        }
        if mine.is_some_and(|r| r != role.as_byte()) {
            return Err(Error::DuplicateEnrollment);
        }
        let staged_has = |e: u32| {
            acct.staged.get(&e).is_some_and(|s| match role {
                Role::Primary => s.primary.is_some(),
                Role::Secondary => s.secondary.is_some(),
            })
        };
        match &acct.vault {
            None if epoch == 0 && !staged_has(0) => {}
            None if epoch == 0 => return Err(Error::DuplicateEnrollment),
            None => return Err(Error::NotEnrolled),
            Some(_) if epoch == 0 => return Err(Error::DuplicateEnrollment),
            Some(v) if epoch == v.epoch + 1 && mine == Some(role.as_byte()) && !staged_has(epoch) => {}
            Some(_) if mine != Some(role.as_byte()) => return Err(Error::NotEnrolled),
            Some(_) => return Err(Error::ProtocolOrder(format!("deposit for epoch {epoch}"))),
        }
        self.commit(
            &mut db,
            Event::Deposited {
                account: me.account.clone(),
                device_id: me.device_id.clone(),
                role: role.as_byte(),
                epoch,
                sub_share: hex::encode(f.field("sub_share")),
                wrapped_catalog_key: (!wrapped.is_empty()).then(|| hex::encode(wrapped)),
            },
        )?;
        Ok(Frame::ok(f.flow, f.session))
    }

    fn file_put(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let me = self.session(f.field("token"), caller)?;
        let tag = FileTag::from_slice(f.field("tag"))?;
        let seed = f.field("seed");
        if !tag.is_reserved() && seed.len() != SEED_LEN {
            return Err(Error::Malformed("seed length".into()));
        }
        let key = (me.account.clone(), tag.to_hex());
        {
            let db = self.db.lock().unwrap();
            let acct = db.accounts.get(&me.account).ok_or(Error::UnknownAccount)?;
            if !tag.is_reserved() && (acct.files.contains_key(&key.1) || acct.purged.contains(&key.1)) {
                return Err(Error::TagExists);
            }
            if !self.uploads.lock().unwrap().insert(key.clone()) {
                return Err(Error::TagExists);
            }
        }
        let stored = self
            .blobs
            .put(&Self::blob_key(&key.0, &key.1), f.field("record"))
            .and_then(|_| {
                let mut db = self.db.lock().unwrap();
                self.commit(
                    &mut db,
                    Event::FileStored {
                        account: key.0.clone(),
                        tag: key.1.clone(),
                        seed: hex::encode(seed),
                        at_ms: self.now(),
                    },
                )
            });
        self.uploads.lock().unwrap().remove(&key);
        stored?;
        Ok(Frame::ok(f.flow, f.session))
    }

    /// The stored seed of a live file, with the caller's account.
    fn live_seed(&self, caller: &Caller, f: &Frame) -> Result<(String, String, Vec<u8>)> {
        let me = self.session(f.field("token"), caller)?;
        let tag = FileTag::from_slice(f.field("tag"))?.to_hex();
        let db = self.db.lock().unwrap();
        let acct = db.accounts.get(&me.account).ok_or(Error::UnknownAccount)?;
        match acct.files.get(&tag) {
            Some(m) if m.deleted_at_ms.is_none() => Ok((me.account.clone(), tag, m.seed.clone())),
            _ => Err(Error::UnknownTag),
        }
    }

    fn file_head(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let (_, _, seed) = self.live_seed(caller, f)?;
        Ok(Frame::new(f.flow, f.session, MsgType::FileMeta, vec![seed]))
    }

    fn file_get(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let (account, tag, seed) = self.live_seed(caller, f)?;
        let record = self.blobs.get(&Self::blob_key(&account, &tag))?;
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::FileData,
            vec![seed, record],
        ))
    }

    fn file_trash(&self, caller: &Caller, f: &Frame, restore: bool) -> Result<Frame> {
        let me = self.session(f.field("token"), caller)?;
        let parsed = FileTag::from_slice(f.field("tag"))?;
        if parsed.is_reserved() {
            return Err(Error::Malformed("reserved tag".into()));
        }
        let tag = parsed.to_hex();
        let now = self.now();
        let window = ms(self.config.trash_window);
        let mut db = self.db.lock().unwrap();
        let acct = db.accounts.get(&me.account).ok_or(Error::UnknownAccount)?;
        let meta = acct.files.get(&tag).ok_or(Error::UnknownTag)?;
        let event = match (restore, meta.deleted_at_ms) {
            (false, None) => Event::FileDeleted {
                account: me.account.clone(),
                tag,
                at_ms: now,
            },
            (true, Some(d)) if now < d + window => Event::FileRestored {
                account: me.account.clone(),
                tag,
            },
            _ => return Err(Error::UnknownTag),
        };
        self.commit(&mut db, event)?;
        Ok(Frame::ok(f.flow, f.session))
    }

    fn recover_request(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let me = self.session(f.field("token"), caller)?;
        let mode = RecoveryMode::from_byte(read_byte(f.field("mode"), "mode")?)?;
        let which = Role::from_byte(read_byte(f.field("which"), "which")?)
            .ok_or_else(|| Error::Malformed("which".into()))?;
        let binding = Binding {
            account: me.account.clone(),
            which,
            device_id: read_string(f.field("device_id"), "device id")?,
            addr: read_string(f.field("addr"), "address")?,
            identity: PeerKey::from_slice(f.field("identity"))?,
        };
        // The share goes to the device asking for it, over its own channel.
        if binding.identity != caller.identity || binding.device_id != me.device_id {
            return Err(Error::Malformed("binding must name the requesting device".into()));
        }
        let old = {
            let db = self.db.lock().unwrap();
            let acct = db.accounts.get(&me.account).ok_or(Error::UnknownAccount)?;
            if acct.vault.is_none() {
                return Err(Error::NotEnrolled);
            }
            if mode == RecoveryMode::Recover && acct.locked_until_ms > self.now() {
                return Err(Error::RecoveryLocked);
            }
            let (_, d) = acct.device_with_role(which).ok_or(Error::NotEnrolled)?;
            d.clone()
        };
        if old.identity == binding.identity.to_hex() {
            return Err(Error::Malformed("new device equals the old one".into()));
        }
        let old_identity = PeerKey::from_hex(&old.identity)?;
        let timeout = match mode {
            RecoveryMode::Migrate => self.config.approval_timeout,
            RecoveryMode::Recover => self.config.liveness_timeout,
        };
        let ping = Frame::new(
            mode.flow(),
            f.session,
            MsgType::AuthPing,
            vec![
                vec![mode as u8],
                vec![which.as_byte()],
                binding.device_id.clone().into_bytes(),
                binding.addr.clone().into_bytes(),
                binding.identity.0.to_vec(),
            ],
        );
        let answer = self
            .dialer
            .dial(&old.addr, Some(&old_identity), Some(timeout))
            .and_then(|link| link.call(&ping))
            .and_then(|r| r.expect(MsgType::AuthApprove))
            .and_then(|r| PingAnswer::from_byte(read_byte(r.field("decision"), "decision")?));
        match (mode, answer) {
            (RecoveryMode::Migrate, Ok(PingAnswer::Approve)) => self.release(f, &binding, mode),
            (RecoveryMode::Migrate, Ok(_)) => Err(Error::ApprovalDenied),
            (RecoveryMode::Migrate, Err(_)) => Err(Error::OldDeviceUnreachable),
            (RecoveryMode::Recover, Ok(_)) => Err(Error::OldDeviceResponded),
            (RecoveryMode::Recover, Err(_)) => {
                let mut nonce = [0u8; 32];
                OsRng.fill_bytes(&mut nonce);
                self.challenges.lock().unwrap().insert(
                    nonce,
                    Challenge {
                        binding,
                        expires_at_ms: self.now() + ms(self.config.challenge_ttl),
                    },
                );
                Ok(Frame::new(
                    f.flow,
                    f.session,
                    MsgType::VerifyChallenge,
                    vec![nonce.to_vec()],
                ))
            }
        }
    }

    fn verify_identity_frame(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let me = self.session(f.field("token"), caller)?;
        let nonce: [u8; 32] = read_array(f.field("nonce"), "nonce")?;
        // Single use: the challenge is gone whatever the outcome.
        let challenge = self
            .challenges
            .lock()
            .unwrap()
            .remove(&nonce)
            .ok_or(Error::VerificationFailed)?;
        let b = &challenge.binding;
        if challenge.expires_at_ms <= self.now()
            || b.account != me.account
            || b.identity != caller.identity
        {
            return Err(Error::VerificationFailed);
        }
        if self.verify_identity(&b.account, &nonce, f.field("mac"), b)? {
            self.release(f, b, RecoveryMode::Recover)
        } else {
            Err(Error::VerificationFailed)
        }
    }

    /// Checks an identity proof and applies the failure throttle.
    fn verify_identity(
        &self,
        account: &str,
        nonce: &[u8; 32],
        mac: &[u8],
        b: &Binding,
    ) -> Result<bool> {
        let mut db = self.db.lock().unwrap();
        let acct = db.accounts.get(account).ok_or(Error::UnknownAccount)?;
        let now = self.now();
        if acct.locked_until_ms > now {
            return Err(Error::RecoveryLocked);
        }
        let expected = identity_proof(
            &acct.recovery_secret,
            nonce,
            account,
            b.which,
            &b.device_id,
            &b.identity,
        );
        let ok = mac.len() == expected.len() && bool::from(expected.ct_eq(mac));
        let failures = acct.failures;
        let event = if ok {
            Event::VerificationPassed {
                account: account.to_owned(),
            }
        } else if failures + 1 >= self.config.max_failures {
            Event::VerificationFailed {
                account: account.to_owned(),
                failures: 0,
                locked_until_ms: now + ms(self.config.lockout),
            }
        } else {
            Event::VerificationFailed {
                account: account.to_owned(),
                failures: failures + 1,
                locked_until_ms: 0,
            }
        };
        self.commit(&mut db, event)?;
        Ok(ok)
    }

    /// Hands the replaced device's vault scalar to the bound new device and
    /// tells the surviving device to release its sub-share to it.
    fn release(&self, f: &Frame, b: &Binding, mode: RecoveryMode) -> Result<Frame> {
        let (vault, survivor, old_id) = {
            let db = self.db.lock().unwrap();
            let acct = db.accounts.get(&b.account).ok_or(Error::UnknownAccount)?;
            let vault = acct.vault.clone().ok_or(Error::NotEnrolled)?;
            let (sid, s) = acct.device_with_role(b.which.peer()).ok_or(Error::NotEnrolled)?;
            let old_id = acct.device_with_role(b.which).map(|(id, _)| id.clone());
            (vault, (sid.clone(), s.clone()), old_id)
        };
        let (survivor_id, survivor) = survivor;
        let survivor_identity = PeerKey::from_hex(&survivor.identity)?;
        let grant = Frame::new(
            mode.flow(),
            f.session,
            MsgType::RecoverGrant,
            vec![
                vec![mode as u8],
                vec![b.which.as_byte()],
                b.device_id.clone().into_bytes(),
                b.addr.clone().into_bytes(),
                b.identity.0.to_vec(),
                u32_field(vault.epoch),
            ],
        );
        self.dialer
            .dial(&survivor.addr, Some(&survivor_identity), Some(self.config.liveness_timeout))
            .and_then(|link| link.call(&grant))
            .and_then(|r| r.expect(MsgType::Ok))?;
        {
            let mut db = self.db.lock().unwrap();
            self.commit(
                &mut db,
                Event::DeviceReplaced {
                    account: b.account.clone(),
                    role: b.which.as_byte(),
                    epoch: vault.epoch,
                    device_id: b.device_id.clone(),
                    addr: b.addr.clone(),
                    identity: b.identity.to_hex(),
                },
            )?;
        }
        if let Some(old) = old_id.filter(|id| *id != b.device_id) {
            self.tokens
                .lock()
                .unwrap()
                .retain(|_, t| !(t.account == b.account && t.device_id == old));
        }
        let share = match b.which {
            Role::Primary => vault.primary,
            Role::Secondary => vault.secondary,
        };
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::ShareRelease,
            vec![
                share,
                u32_field(vault.epoch),
                vec![],
                vec![],
                vault.wrapped_catalog_key,
                survivor_id.into_bytes(),
                survivor.addr.into_bytes(),
                survivor_identity.0.to_vec(),
            ],
        ))
    }

    fn dispatch(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        match f.kind {
            MsgType::AccountCreate => self.account_create(f),
            MsgType::Login => self.login(caller, f),
            MsgType::SessionInvalidate => self.invalidate(caller, f),
            MsgType::EnrollShares => self.deposit(caller, f),
            MsgType::FilePut => self.file_put(caller, f),
            MsgType::FileHead => self.file_head(caller, f),
            MsgType::FileGet => self.file_get(caller, f),
            MsgType::FileDelete => self.file_trash(caller, f, false),
            MsgType::FileUndelete => self.file_trash(caller, f, true),
            MsgType::RecoverReq => self.recover_request(caller, f),
            MsgType::VerifyIdentity => self.verify_identity_frame(caller, f),
            other => Err(Error::ProtocolOrder(format!(
                "{} is not a storage request",
                other.name()
            ))),
        }
    }
}

impl Endpoint for Cloud {
    fn handle(&self, caller: &Caller, frame: Frame) -> Frame {
        self.dispatch(caller, &frame)
            .unwrap_or_else(|e| Frame::error(frame.flow, frame.session, &e))
    }
}

