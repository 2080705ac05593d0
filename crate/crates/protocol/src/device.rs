//! A user device: drives flows when acting as the primary and serves the
//! peer and the cloud as an [`Endpoint`].
//!
//! Flows between the two devices:
//!
//! - enroll: `ENROLL_SHARES` each way, then each device deposits its cloud
//!   sub-share; the primary also wraps the catalog key under a tPRF key.
//! - encrypt: `SR_COMMIT → SR_SHARE`, `SR_REVEAL → OK`, `TPRF_REQ → TPRF_RESP`,
//!   then `FILE_PUT` to the cloud.
//! - decrypt: `FILE_GET` to the cloud, then `TPRF_REQ → TPRF_RESP` through the
//!   secondary's approval policy.
//! - refresh: `REFRESH_DELTA → ENROLL_SHARES`, `ENROLL_SHARES → OK`, then both
//!   deposit the new cloud sub-shares.
//! - migrate/recover: run on the new device; see [`Device::replace`].

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime};

use rand_core::{OsRng, RngCore};
use zeroize::Zeroizing;

use twofe_core::coin_toss::{Commitment, SeedInitiator, SeedResponder, SR_TIMEOUT};
use twofe_core::file_crypto::{self, CATALOG_TAG, CATALOG_WRAP_TAG, SEED_LEN};
use twofe_core::group::{random_scalar, PrimeGroup};
use twofe_core::tprf::{self, Evaluation};
use twofe_core::{Catalog, CatalogKey, DerivedKey, FileTag, PrfInput, Role, ShareSet};

use crate::approval::Gate;
use crate::channel::IdentityKey;
use crate::clock::{ms, Clock};
use crate::cloud::identity_proof;
use crate::error::{Error, Result};
use crate::state::{DeviceState, Element, Enrollment, PeerInfo, Scalar, SessionToken, StateFile, G};
use crate::transport::{Caller, Dialer, Endpoint, Link, PeerKey};
use crate::wire::{
    read_array, read_byte, read_string, read_u32, read_u64, u32_field, Flow, Frame, MsgType,
    PingAnswer, RecoveryMode, SessionId,
};

const ZERO_SEED: [u8; SEED_LEN] = [0; SEED_LEN];
const USED_SESSION_MEMORY: usize = 4096;

#[derive(Clone, Debug)]
pub struct DeviceConfig {
    /// Bound on each call to the peer. Decryption requests may wait for a
    /// prompt, so this must exceed the approval expiry.
    pub peer_timeout: Duration,
    pub cloud_timeout: Duration,
    /// Take the state-file lock around each write. Set in long-running
    /// daemons that share the file with short-lived CLI processes.
    pub lock_on_save: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            peer_timeout: crate::approval::REQUEST_EXPIRY + Duration::from_secs(10),
            cloud_timeout: Duration::from_secs(200),
            lock_on_save: false,
        }
    }
}

/// Instrumentation points for adversary scenarios.
#[derive(Default)]
pub struct Hooks {
    /// Answer evaluation requests with this share instead of the real one.
    pub share_override: Option<Scalar>,
    /// Rewrites every response this device sends.
    pub tamper: Option<Box<dyn Fn(&mut Frame) + Send + Sync>>,
    /// Sees every request before it is handled; a returned frame replaces
    /// the normal response.
    pub intercept: Option<Box<dyn Fn(&Caller, &Frame) -> Option<Frame> + Send + Sync>>,
    /// Confirms the pairing code on first contact. Absent means accept.
    pub confirm_pairing: Option<Box<dyn Fn(&str) -> bool + Send + Sync>>,
}

/// Timing of one key derivation as seen by the initiating device.
#[derive(Clone, Copy, Debug, Default)]
pub struct DerivationTiming {
    pub total: Duration,
    /// Time spent in this device's own cryptographic computation.
    pub local_compute: Duration,
}

enum Session {
    Seed {
        responder: SeedResponder,
        started_ms: u64,
    },
    SeedReady {
        seed: Zeroizing<Vec<u8>>,
        started_ms: u64,
    },
}

impl Session {
    fn started_ms(&self) -> u64 {
        match self {
            Session::Seed { started_ms, .. } | Session::SeedReady { started_ms, .. } => *started_ms,
        }
    }
}

/// A pending share update while a refresh is in flight on the responder.
struct PendingRefresh {
    session: SessionId,
    shares: ShareSet<G>,
    pk: Element,
    epoch: u32,
    delta: Scalar,
}

#[derive(Clone, Debug)]
struct Grant {
    mode: RecoveryMode,
    which: Role,
    device: PeerInfo,
    epoch: u32,
}

pub struct Device {
    identity: Arc<IdentityKey>,
    state: Mutex<DeviceState>,
    store: Option<StateFile>,
    dialer: Arc<dyn Dialer>,
    clock: Arc<dyn Clock>,
    gate: Arc<Gate>,
    config: DeviceConfig,
    hooks: RwLock<Hooks>,
    sessions: Mutex<HashMap<SessionId, Session>>,
    used: Mutex<(HashSet<SessionId>, VecDeque<SessionId>)>,
    refresh: Mutex<Option<PendingRefresh>>,
    grants: Mutex<Vec<Grant>>,
    links: Mutex<HashMap<String, Arc<dyn Link>>>,
    mirror: Mutex<Catalog>,
    flow_lock: Mutex<()>,
    compute_ns: AtomicU64,
    last_derivation: Mutex<Option<DerivationTiming>>,
    synced: Mutex<Option<SystemTime>>,
}

fn new_session() -> SessionId {
    let mut s = [0u8; 16];
    OsRng.fill_bytes(&mut s);
    s
}

fn modified(store: &StateFile) -> Option<SystemTime> {
    std::fs::metadata(store.path()).and_then(|m| m.modified()).ok()
}

fn scalar_bytes(s: &Scalar) -> Vec<u8> {
    G::encode_scalar(s)
}

impl Device {
    pub fn new(
        state: DeviceState,
        store: Option<StateFile>,
        dialer: Arc<dyn Dialer>,
        clock: Arc<dyn Clock>,
        gate: Arc<Gate>,
        config: DeviceConfig,
    ) -> Result<Arc<Device>> {
        let identity = Arc::new(IdentityKey::from_secret_bytes(&state.identity_secret[..])?);
        let store_mtime = store.as_ref().and_then(modified);
        Ok(Arc::new(Device {
            identity,
            state: Mutex::new(state),
            store,
            dialer,
            clock,
            gate,
            config,
            hooks: RwLock::new(Hooks::default()),
            sessions: Mutex::new(HashMap::new()),
            used: Mutex::new((HashSet::new(), VecDeque::new())),
            refresh: Mutex::new(None),
            grants: Mutex::new(Vec::new()),
            links: Mutex::new(HashMap::new()),
            mirror: Mutex::new(Catalog::new()),
            flow_lock: Mutex::new(()),
            compute_ns: AtomicU64::new(0),
            last_derivation: Mutex::new(None),
            synced: Mutex::new(store_mtime),
        }))
    }

    // ---- accessors ----

    pub fn identity(&self) -> PeerKey {
        self.identity.public()
    }

    pub fn identity_key(&self) -> Arc<IdentityKey> {
        Arc::clone(&self.identity)
    }

    pub fn device_id(&self) -> String {
        self.state.lock().unwrap().device_id.clone()
    }

    pub fn addr(&self) -> String {
        self.state.lock().unwrap().addr.clone()
    }

    pub fn info(&self) -> PeerInfo {
        let st = self.state.lock().unwrap();
        PeerInfo {
            device_id: st.device_id.clone(),
            addr: st.addr.clone(),
            identity: self.identity.public(),
        }
    }

    pub fn gate(&self) -> &Arc<Gate> {
        &self.gate
    }

    pub fn role(&self) -> Option<Role> {
        self.state
            .lock()
            .unwrap()
            .enrollment
            .as_ref()
            .map(Enrollment::role)
    }

    pub fn epoch(&self) -> Option<u32> {
        self.state
            .lock()
            .unwrap()
            .enrollment
            .as_ref()
            .map(|e| e.epoch)
    }

    pub fn is_retired(&self) -> bool {
        self.state.lock().unwrap().retired
    }

    /// A copy of everything at rest on this device.
    pub fn snapshot(&self) -> DeviceState {
        self.state.lock().unwrap().clone()
    }

    pub fn set_hooks(&self, hooks: Hooks) {
        *self.hooks.write().unwrap() = hooks;
    }

    /// Open responder sessions. Zero whenever no flow is in progress.
    pub fn open_sessions(&self) -> usize {
        self.expire_sessions();
        self.sessions.lock().unwrap().len() + usize::from(self.refresh.lock().unwrap().is_some())
    }

    /// Drops coin tosses that stalled past the timeout.
    fn expire_sessions(&self) {
        let now = self.clock.now_ms();
        let mut sessions = self.sessions.lock().unwrap();
        let stale: Vec<SessionId> = sessions
            .iter()
            .filter(|(_, s)| now >= s.started_ms() + ms(SR_TIMEOUT))
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            sessions.remove(&id);
            let _ = self.mark_used(id);
        }
    }

    pub fn compute_time(&self) -> Duration {
        Duration::from_nanos(self.compute_ns.load(Ordering::SeqCst))
    }

    pub fn last_derivation(&self) -> Option<DerivationTiming> {
        *self.last_derivation.lock().unwrap()
    }

    fn timed<T>(&self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.compute_ns
            .fetch_add(t.elapsed().as_nanos() as u64, Ordering::SeqCst);
        out
    }

    pub fn set_peer(&self, peer: PeerInfo) {
        self.state.lock().unwrap().peer = Some(peer);
    }

    pub fn set_cloud(&self, cloud: PeerInfo) {
        self.state.lock().unwrap().cloud = Some(cloud);
    }

    pub fn peer(&self) -> Option<PeerInfo> {
        self.state.lock().unwrap().peer.clone()
    }

    fn save(&self) -> Result<()> {
        if let Some(store) = &self.store {
            let _lock = if self.config.lock_on_save {
                Some(store.lock()?)
            } else {
                None
            };
            let st = self.state.lock().unwrap().clone();
            store.store(&st)?;
            *self.synced.lock().unwrap() = modified(store);
        }
        Ok(())
    }

    /// Picks up changes another process made to the state file.
    pub fn reload_if_changed(&self) -> Result<()> {
        let Some(store) = &self.store else {
            return Ok(());
        };
        let mut synced = self.synced.lock().unwrap();
        let now = modified(store);
        if now.is_none() || now == *synced {
            return Ok(());
        }
        let fresh = store.load()?;
        *self.state.lock().unwrap() = fresh;
        *synced = now;
        Ok(())
    }

    fn enrollment(&self) -> Result<Enrollment> {
        let st = self.state.lock().unwrap();
        st.enrollment.clone().ok_or(Error::NotEnrolled)
    }

    fn token(&self) -> Result<Vec<u8>> {
        let st = self.state.lock().unwrap();
        st.token
            .as_ref()
            .map(|t| t.token.to_vec())
            .ok_or(Error::BadToken)
    }

    fn account(&self) -> Result<String> {
        self.state
            .lock()
            .unwrap()
            .account
            .clone()
            .ok_or(Error::NotEnrolled)
    }

    // ---- outbound calls ----

    fn call(&self, to: &PeerInfo, frame: &Frame, timeout: Duration) -> Result<Frame> {
        let cached = self.links.lock().unwrap().get(&to.addr).cloned();
        if let Some(link) = cached {
            match link.call(frame) {
                Err(Error::PeerUnreachable) => {
                    self.links.lock().unwrap().remove(&to.addr);
                }
                other => return other,
            }
        }
        let link = self.dialer.dial(&to.addr, Some(&to.identity), Some(timeout))?;
        let out = link.call(frame);
        if out.is_ok() {
            self.links.lock().unwrap().insert(to.addr.clone(), link);
        }
        out
    }

    fn call_peer(&self, frame: &Frame) -> Result<Frame> {
        let peer = self.peer().ok_or(Error::NotEnrolled)?;
        self.call(&peer, frame, self.config.peer_timeout)
    }

    fn call_cloud(&self, frame: &Frame) -> Result<Frame> {
        let cloud = self
            .state
            .lock()
            .unwrap()
            .cloud
            .clone()
            .ok_or(Error::CloudUnreachable)?;
        self.call(&cloud, frame, self.config.cloud_timeout)
            .map_err(|e| match e {
                Error::PeerUnreachable => Error::CloudUnreachable,
                other => other,
            })
    }

    // ---- account and session ----

    pub fn create_account(&self, account: &str, password: &[u8], recovery_secret: &[u8]) -> Result<()> {
        let f = Frame::new(
            Flow::Session,
            new_session(),
            MsgType::AccountCreate,
            vec![account.as_bytes().to_vec(), password.to_vec(), recovery_secret.to_vec()],
        );
        self.call_cloud(&f)?.expect(MsgType::Ok)?;
        Ok(())
    }

    pub fn login(&self, account: &str, password: &[u8]) -> Result<()> {
        let info = self.info();
        let f = Frame::new(
            Flow::Session,
            new_session(),
            MsgType::Login,
            vec![
                account.as_bytes().to_vec(),
                password.to_vec(),
                info.device_id.into_bytes(),
                info.addr.into_bytes(),
                info.identity.0.to_vec(),
            ],
        );
        let r = self.call_cloud(&f)?.expect(MsgType::Session)?;
        let token: [u8; 32] = read_array(r.field("token"), "token")?;
        let expires_at_ms = read_u64(r.field("expires_at_ms"), "expiry")?;
        {
            let mut st = self.state.lock().unwrap();
            if st.enrollment.as_ref().is_some_and(|e| e.account != account) {
                return Err(Error::DuplicateEnrollment);
            }
            st.account = Some(account.to_owned());
            st.token = Some(SessionToken {
                token,
                expires_at_ms,
            });
        }
        self.save()
    }

    /// Kills the sessions of `device_id` (possibly this device).
    pub fn invalidate(&self, device_id: &str) -> Result<()> {
        let f = Frame::new(
            Flow::Session,
            new_session(),
            MsgType::SessionInvalidate,
            vec![self.token()?, device_id.as_bytes().to_vec()],
        );
        self.call_cloud(&f)?.expect(MsgType::Ok)?;
        Ok(())
    }

    /// Six digits both users compare when pairing.
    pub fn pairing_code(&self, peer: &PeerKey, this_is_primary: bool) -> String {
        let me = self.identity.public();
        if this_is_primary {
            crate::channel::pairing_code(&me, peer)
        } else {
            crate::channel::pairing_code(peer, &me)
        }
    }

    fn deposit(&self, e: &Enrollment, flow: Flow, session: SessionId, wrapped: Vec<u8>) -> Result<()> {
        let f = Frame::new(
            flow,
            session,
            MsgType::EnrollShares,
            vec![
                self.token()?,
                vec![e.role().as_byte()],
                u32_field(e.epoch),
                scalar_bytes(&e.shares.sub_share_cloud),
                vec![],
                vec![],
                wrapped,
                vec![],
            ],
        );
        self.call_cloud(&f)?.expect(MsgType::Ok)?;
        Ok(())
    }

    // ---- enrollment ----

    /// Enrolls this device as the primary with the paired peer as secondary.
    pub fn enroll(&self) -> Result<()> {
        let _guard = self.flow_lock.lock().unwrap();
        let account = self.account()?;
        let peer = self.peer().ok_or_else(|| Error::PairingFailure("no paired device".into()))?;
        if self.state.lock().unwrap().enrollment.is_some() {
            return Err(Error::DuplicateEnrollment);
        }
        let code = self.pairing_code(&peer.identity, true);
        if let Some(confirm) = &self.hooks.read().unwrap().confirm_pairing {
            if !confirm(&code) {
                return Err(Error::PairingFailure("pairing code rejected".into()));
            }
        }
        let session = new_session();
        let shares = self.timed(|| ShareSet::<G>::generate(Role::Primary, &mut OsRng))?;
        let catalog_key = CatalogKey::generate(&mut OsRng)?;
        let req = Frame::new(
            Flow::Enroll,
            session,
            MsgType::EnrollShares,
            vec![
                vec![],
                vec![Role::Primary.as_byte()],
                u32_field(0),
                scalar_bytes(&shares.sub_share_peer),
                vec![],
                catalog_key.as_bytes().to_vec(),
                vec![],
                account.clone().into_bytes(),
            ],
        );
        let r = self.call_peer(&req)?.expect(MsgType::EnrollShares)?;
        if read_byte(r.field("role"), "role")? != Role::Secondary.as_byte()
            || read_u32(r.field("epoch"), "epoch")? != 0
        {
            return Err(Error::ProtocolOrder("unexpected enrollment answer".into()));
        }
        let held = G::decode_scalar(r.field("sub_share"))?;
        let pk = G::decode_element(r.field("public_key"))?;
        if pk == G::identity() {
            return Err(Error::PairingFailure("secondary public key is the identity".into()));
        }
        let e = Enrollment {
            account,
            epoch: 0,
            shares,
            held,
            pk,
            catalog_key,
        };
        let key = self.derive_with(&e, Flow::Enroll, session, &CATALOG_WRAP_TAG, &ZERO_SEED)?;
        let wrapped =
            file_crypto::seal(&key, &CATALOG_WRAP_TAG, &ZERO_SEED, e.catalog_key.as_bytes());
        self.deposit(&e, Flow::Enroll, session, wrapped)?;
        self.state.lock().unwrap().enrollment = Some(e.clone());
        self.save()?;
        self.store_catalog(&e, &Catalog::new(), session, Flow::Enroll)
    }

    fn on_enroll(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let (account, token_ok, enrolled, peer) = {
            let st = self.state.lock().unwrap();
            (
                st.account.clone(),
                st.token.is_some(),
                st.enrollment.is_some(),
                st.peer.clone(),
            )
        };
        if enrolled {
            return Err(Error::DuplicateEnrollment);
        }
        let account = account.filter(|_| token_ok).ok_or(Error::NotEnrolled)?;
        if read_string(f.field("account"), "account")? != account {
            return Err(Error::PairingFailure("account mismatch".into()));
        }
        if read_byte(f.field("role"), "role")? != Role::Primary.as_byte()
            || read_u32(f.field("epoch"), "epoch")? != 0
        {
            return Err(Error::ProtocolOrder("unexpected enrollment request".into()));
        }
        match &peer {
            Some(p) if p.identity != caller.identity => {
                return Err(Error::PairingFailure("unexpected device".into()))
            }
            _ => {}
        }
        let code = self.pairing_code(&caller.identity, false);
        if let Some(confirm) = &self.hooks.read().unwrap().confirm_pairing {
            if !confirm(&code) {
                return Err(Error::PairingFailure("pairing code rejected".into()));
            }
        }
        let held = G::decode_scalar(f.field("sub_share"))?;
        let catalog_key = CatalogKey::from_slice(f.field("catalog_key"))?;
        let shares = self.timed(|| ShareSet::<G>::generate(Role::Secondary, &mut OsRng))?;
        let pk = shares.public_key();
        let e = Enrollment {
            account,
            epoch: 0,
            shares,
            held,
            pk,
            catalog_key,
        };
        self.deposit(&e, f.flow, f.session, vec![])?;
        {
            let mut st = self.state.lock().unwrap();
            if st.peer.is_none() {
                st.peer = Some(PeerInfo {
                    device_id: String::new(),
                    addr: String::new(),
                    identity: caller.identity,
                });
            }
            st.enrollment = Some(e.clone());
        }
        self.save()?;
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::EnrollShares,
            vec![
                vec![],
                vec![Role::Secondary.as_byte()],
                u32_field(0),
                scalar_bytes(&e.shares.sub_share_peer),
                G::encode_element(&pk),
                vec![],
                vec![],
                vec![],
            ],
        ))
    }

    // ---- key derivation ----

    fn derive_with(
        &self,
        e: &Enrollment,
        flow: Flow,
        session: SessionId,
        tag: &FileTag,
        seed: &[u8; SEED_LEN],
    ) -> Result<DerivedKey> {
        if e.role() != Role::Primary {
            return Err(Error::ProtocolOrder("only the primary derives keys".into()));
        }
        let req = Frame::new(
            flow,
            session,
            MsgType::TprfReq,
            vec![tag.0.to_vec(), seed.to_vec()],
        );
        let r = self.call_peer(&req)?.expect(MsgType::TprfResp)?;
        let x = PrfInput::new(&tag.0, seed);
        self.timed(|| {
            tprf::finish_encoded::<G>(&x, e.shares.own_share, &e.pk, r.field("element"), r.field("proof"))
        })
        .map_err(Error::from)
    }

    /// Runs the coin toss with the secondary; returns the agreed seed.
    fn shared_seed(&self, session: SessionId) -> Result<Zeroizing<[u8; SEED_LEN]>> {
        let mut init = SeedInitiator::new(SEED_LEN);
        let result = (|| {
            let c = self.timed(|| init.commit(&mut OsRng))?;
            let r = self
                .call_peer(&Frame::new(
                    Flow::Encrypt,
                    session,
                    MsgType::SrCommit,
                    vec![c.0.to_vec()],
                ))?
                .expect(MsgType::SrShare)?;
            let (opening, seed) = self.timed(|| init.receive_share(r.field("share")))?;
            self.call_peer(&Frame::new(
                Flow::Encrypt,
                session,
                MsgType::SrReveal,
                vec![opening.to_vec()],
            ))?
            .expect(MsgType::Ok)?;
            let mut out = Zeroizing::new([0u8; SEED_LEN]);
            out.copy_from_slice(&seed);
            Ok(out)
        })();
        match &result {
            Ok(_) => init.complete(),
            Err(_) => init.abort(),
        }
        result
    }

    // ---- catalog ----

    fn load_catalog(&self, e: &Enrollment, flow: Flow, session: SessionId) -> Result<Catalog> {
        let r = self
            .call_cloud(&Frame::new(
                flow,
                session,
                MsgType::FileGet,
                vec![self.token()?, CATALOG_TAG.0.to_vec()],
            ))?
            .expect(MsgType::FileData)?;
        Ok(Catalog::open(&e.catalog_key, r.field("record"))?)
    }

    fn store_catalog(&self, e: &Enrollment, c: &Catalog, session: SessionId, flow: Flow) -> Result<()> {
        let sealed = c.seal(&e.catalog_key, &mut OsRng)?;
        self.call_cloud(&Frame::new(
            flow,
            session,
            MsgType::FilePut,
            vec![self.token()?, CATALOG_TAG.0.to_vec(), vec![], sealed],
        ))?
        .expect(MsgType::Ok)?;
        Ok(())
    }

    pub fn list(&self) -> Result<Vec<(String, FileTag)>> {
        let e = self.enrollment()?;
        let c = self.load_catalog(&e, Flow::Session, new_session())?;
        Ok(c.iter().map(|(n, t)| (n.to_owned(), *t)).collect())
    }

    fn resolve(&self, e: &Enrollment, name_or_tag: &str, session: SessionId) -> Result<FileTag> {
        if name_or_tag.len() == 32 {
            if let Ok(t) = FileTag::from_hex(name_or_tag) {
                return Ok(t);
            }
        }
        Ok(self.load_catalog(e, Flow::Decrypt, session)?.resolve(name_or_tag)?)
    }

    // ---- encrypt / decrypt ----

    /// Encrypts `data` under a fresh jointly derived key, uploads it and
    /// records `name` in the catalog.
    pub fn encrypt(&self, name: &str, data: &[u8]) -> Result<FileTag> {
        let e = self.enrollment()?;
        let session = new_session();
        let started = Instant::now();
        let compute_before = self.compute_time();
        let seed = self.shared_seed(session)?;
        let tag = FileTag::generate(&mut OsRng)?;
        let key = self.derive_with(&e, Flow::Encrypt, session, &tag, &seed)?;
        *self.last_derivation.lock().unwrap() = Some(DerivationTiming {
            total: started.elapsed(),
            local_compute: self.compute_time() - compute_before,
        });
        let record = file_crypto::seal(&key, &tag, &seed, data);
        drop(key);
        self.call_cloud(&Frame::new(
            Flow::Encrypt,
            session,
            MsgType::FilePut,
            vec![self.token()?, tag.0.to_vec(), seed.to_vec(), record],
        ))?
        .expect(MsgType::Ok)?;
        let mut catalog = self.load_catalog(&e, Flow::Encrypt, session)?;
        let replaced = catalog.put(name, tag);
        self.store_catalog(&e, &catalog, session, Flow::Encrypt)?;
        if let Some(old) = replaced {
            // The previous version goes to the trash rather than away.
            let _ = self.call_cloud(&Frame::new(
                Flow::Encrypt,
                session,
                MsgType::FileDelete,
                vec![self.token()?, old.0.to_vec()],
            ));
        }
        Ok(tag)
    }

    /// Fetches and decrypts a file by catalog name or tag hex.
    pub fn decrypt(&self, name_or_tag: &str) -> Result<Zeroizing<Vec<u8>>> {
        let e = self.enrollment()?;
        let session = new_session();
        let tag = self.resolve(&e, name_or_tag, session)?;
        self.decrypt_tag(&e, &tag, session)
    }

    /// The seed comes first and the derivation runs before the body is
    /// fetched, so the derivation never waits on or follows a bulk transfer.
    fn decrypt_tag(&self, e: &Enrollment, tag: &FileTag, session: SessionId) -> Result<Zeroizing<Vec<u8>>> {
        let token = self.token()?;
        let head = self
            .call_cloud(&Frame::new(
                Flow::Decrypt,
                session,
                MsgType::FileHead,
                vec![token.clone(), tag.0.to_vec()],
            ))?
            .expect(MsgType::FileMeta)?;
        let seed: [u8; SEED_LEN] = read_array(head.field("seed"), "seed")?;
        let started = Instant::now();
        let compute_before = self.compute_time();
        let key = self.derive_with(e, Flow::Decrypt, session, tag, &seed)?;
        *self.last_derivation.lock().unwrap() = Some(DerivationTiming {
            total: started.elapsed(),
            local_compute: self.compute_time() - compute_before,
        });
        let r = self
            .call_cloud(&Frame::new(
                Flow::Decrypt,
                session,
                MsgType::FileGet,
                vec![token, tag.0.to_vec()],
            ))?
            .expect(MsgType::FileData)?;
        // The record header repeats the seed under the AEAD, so a swapped
        // body fails to open; this catches it before any decryption work.
        if r.field("seed") != &seed[..] {
            return Err(Error::AuthFailure);
        }
        Ok(file_crypto::open(&key, tag, r.field("record"))?)
    }

    /// Moves a file to the cloud's trash and drops it from the catalog.
    pub fn delete(&self, name: &str) -> Result<FileTag> {
        let e = self.enrollment()?;
        let session = new_session();
        let mut catalog = self.load_catalog(&e, Flow::Session, session)?;
        let tag = catalog.remove(name)?;
        self.call_cloud(&Frame::new(
            Flow::Session,
            session,
            MsgType::FileDelete,
            vec![self.token()?, tag.0.to_vec()],
        ))?
        .expect(MsgType::Ok)?;
        self.store_catalog(&e, &catalog, session, Flow::Session)?;
        Ok(tag)
    }

    /// Restores a trashed file under `name`.
    pub fn undelete(&self, tag: &FileTag, name: &str) -> Result<()> {
        let e = self.enrollment()?;
        let session = new_session();
        self.call_cloud(&Frame::new(
            Flow::Session,
            session,
            MsgType::FileUndelete,
            vec![self.token()?, tag.0.to_vec()],
        ))?
        .expect(MsgType::Ok)?;
        let mut catalog = self.load_catalog(&e, Flow::Session, session)?;
        catalog.put(name, *tag);
        self.store_catalog(&e, &catalog, session, Flow::Session)
    }

    // ---- responder side of derivations ----

    fn check_peer(&self, caller: &Caller) -> Result<()> {
        match self.peer() {
            Some(p) if p.identity == caller.identity => Ok(()),
            _ => Err(Error::ProtocolOrder("request from a device that is not the peer".into())),
        }
    }

    fn check_cloud(&self, caller: &Caller) -> Result<()> {
        match &self.state.lock().unwrap().cloud {
            Some(c) if c.identity == caller.identity => Ok(()),
            _ => Err(Error::ProtocolOrder("request does not come from the cloud".into())),
        }
    }

    fn mark_used(&self, session: SessionId) -> Result<()> {
        let mut used = self.used.lock().unwrap();
        if !used.0.insert(session) {
            return Err(Error::ProtocolOrder("session already used".into()));
        }
        used.1.push_back(session);
        if used.1.len() > USED_SESSION_MEMORY {
            let old = used.1.pop_front().unwrap();
            used.0.remove(&old);
        }
        Ok(())
    }

    fn is_used(&self, session: &SessionId) -> bool {
        self.used.lock().unwrap().0.contains(session)
    }

    fn secondary_share(&self) -> Result<Scalar> {
        let st = self.state.lock().unwrap();
        match &st.enrollment {
            Some(e) if e.role() == Role::Secondary => Ok(e.shares.own_share),
            Some(_) => Err(Error::ProtocolOrder("this device is not the secondary".into())),
            None => Err(Error::NotEnrolled),
        }
    }

    fn on_sr_commit(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_peer(caller)?;
        self.secondary_share()?;
        if f.flow != Flow::Encrypt {
            return Err(Error::ProtocolOrder("coin toss outside encryption".into()));
        }
        let c = Commitment::from_slice(f.field("commitment"))?;
        self.expire_sessions();
        let now = self.clock.now_ms();
        let mut sessions = self.sessions.lock().unwrap();
        if sessions.contains_key(&f.session) || self.is_used(&f.session) {
            return Err(Error::ProtocolOrder("session already started".into()));
        }
        let mut responder = SeedResponder::new(SEED_LEN);
        let share = self.timed(|| {
            responder.receive_commitment(c)?;
            responder.respond(&mut OsRng)
        })?;
        sessions.insert(
            f.session,
            Session::Seed {
                responder,
                started_ms: now,
            },
        );
        Ok(Frame::new(f.flow, f.session, MsgType::SrShare, vec![share]))
    }

    fn on_sr_reveal(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_peer(caller)?;
        let mut sessions = self.sessions.lock().unwrap();
        let (mut responder, started_ms) = match sessions.remove(&f.session) {
            Some(Session::Seed {
                responder,
                started_ms,
            }) => (responder, started_ms),
            other => {
                if let Some(ready) = other {
                    sessions.insert(f.session, ready);
                }
                return Err(Error::ProtocolOrder("opening without a pending commitment".into()));
            }
        };
        match self.timed(|| responder.receive_opening(f.field("preimage"))) {
            Ok(seed) => {
                sessions.insert(f.session, Session::SeedReady { seed, started_ms });
                Ok(Frame::ok(f.flow, f.session))
            }
            Err(e) => {
                drop(sessions);
                let _ = self.mark_used(f.session);
                Err(e.into())
            }
        }
    }

    fn filename_for(&self, tag: &FileTag) -> Option<String> {
        if let Some(n) = self.mirror.lock().unwrap().name_of(tag) {
            return Some(n.to_owned());
        }
        // Refresh the local mirror of the catalog from the cloud.
        let e = self.enrollment().ok()?;
        let c = self.load_catalog(&e, Flow::Session, new_session()).ok()?;
        let name = c.name_of(tag).map(str::to_owned);
        *self.mirror.lock().unwrap() = c;
        name
    }

    fn on_tprf(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_peer(caller)?;
        let mut k_d = self.secondary_share()?;
        let tag = FileTag::from_slice(f.field("tag"))?;
        let seed: [u8; SEED_LEN] = read_array(f.field("seed"), "seed")?;
        match f.flow {
            Flow::Encrypt => {
                // Only for the seed this session's coin toss produced.
                let session = self.sessions.lock().unwrap().remove(&f.session);
                let matches = matches!(
                    &session,
                    Some(Session::SeedReady { seed: s, .. }) if s[..] == seed[..] && !tag.is_reserved()
                );
                // Any evaluation request ends the session, matching or not.
                if session.is_some() {
                    let _ = self.mark_used(f.session);
                }
                if !matches {
                    return Err(Error::ProtocolOrder(
                        "evaluation without a matching coin toss".into(),
                    ));
                }
            }
            Flow::Decrypt => {
                if tag.is_reserved() {
                    return Err(Error::ProtocolOrder("reserved tag".into()));
                }
                self.mark_used(f.session)?;
                let filename = self.filename_for(&tag);
                self.gate.authorize_decrypt(&tag.to_hex(), filename.as_deref())?;
            }
            Flow::Enroll | Flow::Refresh | Flow::Migrate | Flow::Recover => {
                if tag != CATALOG_WRAP_TAG || seed != ZERO_SEED {
                    return Err(Error::ProtocolOrder("evaluation outside a file flow".into()));
                }
                self.mark_used(f.session)?;
            }
            Flow::Session => return Err(Error::ProtocolOrder("evaluation in session flow".into())),
        }
        if let Some(k) = self.hooks.read().unwrap().share_override {
            k_d = k;
        }
        let x = PrfInput::new(&tag.0, &seed);
        let eval: Evaluation<G> = self.timed(|| tprf::respond::<G, _>(&x, k_d, &mut OsRng))?;
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::TprfResp,
            vec![G::encode_element(&eval.element), eval.proof.to_bytes()],
        ))
    }

    // ---- refresh ----

    /// Re-randomizes both shares by a sharing of zero and redistributes all
    /// sub-shares. Either device may initiate.
    pub fn refresh(&self) -> Result<()> {
        let _guard = self.flow_lock.lock().unwrap();
        self.refresh_locked()
    }

    fn refresh_locked(&self) -> Result<()> {
        let e = self.enrollment()?;
        let session = new_session();
        let z = random_scalar::<G, _>(&mut OsRng)?;
        let epoch = e.epoch + 1;
        let r = self
            .call_peer(&Frame::new(
                Flow::Refresh,
                session,
                MsgType::RefreshDelta,
                vec![scalar_bytes(&(-z)), u32_field(epoch)],
            ))?
            .expect(MsgType::EnrollShares)?;
        if read_u32(r.field("epoch"), "epoch")? != epoch
            || read_byte(r.field("role"), "role")? != e.role().peer().as_byte()
        {
            return Err(Error::ProtocolOrder("unexpected refresh answer".into()));
        }
        let peer_sub = G::decode_scalar(r.field("sub_share"))?;
        let own = e.shares.own_share + z;
        let shares = ShareSet::<G>::from_own(e.role(), own, &mut OsRng)?;
        let pk = match e.role() {
            Role::Primary => {
                // The secondary moved by -z.
                let pk = G::decode_element(r.field("public_key"))?;
                if pk != e.pk - z * G::generator() || pk == G::identity() {
                    return Err(Error::State("refreshed public key does not match".into()));
                }
                pk
            }
            Role::Secondary => own * G::generator(),
        };
        let mine = Frame::new(
            Flow::Refresh,
            session,
            MsgType::EnrollShares,
            vec![
                vec![],
                vec![e.role().as_byte()],
                u32_field(epoch),
                scalar_bytes(&shares.sub_share_peer),
                if e.role() == Role::Secondary {
                    G::encode_element(&pk)
                } else {
                    vec![]
                },
                vec![],
                vec![],
                vec![],
            ],
        );
        self.call_peer(&mine)?.expect(MsgType::Ok)?;
        let next = Enrollment {
            account: e.account.clone(),
            epoch,
            shares,
            held: peer_sub,
            pk,
            catalog_key: e.catalog_key.clone(),
        };
        self.deposit(&next, Flow::Refresh, session, vec![])?;
        self.state.lock().unwrap().enrollment = Some(next);
        self.save()
    }

    fn on_refresh_delta(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_peer(caller)?;
        let e = self.enrollment()?;
        let epoch = read_u32(f.field("epoch"), "epoch")?;
        if epoch != e.epoch + 1 {
            return Err(Error::ProtocolOrder(format!(
                "refresh to epoch {epoch} from {}",
                e.epoch
            )));
        }
        let delta = G::decode_scalar(f.field("delta"))?;
        let own = e.shares.own_share + delta;
        let shares = self.timed(|| ShareSet::<G>::from_own(e.role(), own, &mut OsRng))?;
        let pk = match e.role() {
            Role::Secondary => own * G::generator(),
            Role::Primary => e.pk,
        };
        let reply = Frame::new(
            f.flow,
            f.session,
            MsgType::EnrollShares,
            vec![
                vec![],
                vec![e.role().as_byte()],
                u32_field(epoch),
                scalar_bytes(&shares.sub_share_peer),
                if e.role() == Role::Secondary {
                    G::encode_element(&pk)
                } else {
                    vec![]
                },
                vec![],
                vec![],
                vec![],
            ],
        );
        *self.refresh.lock().unwrap() = Some(PendingRefresh {
            session: f.session,
            shares,
            pk,
            epoch,
            delta,
        });
        Ok(reply)
    }

    fn on_refresh_shares(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_peer(caller)?;
        let pending = {
            let mut slot = self.refresh.lock().unwrap();
            match slot.as_ref() {
                Some(p) if p.session == f.session => slot.take().unwrap(),
                _ => return Err(Error::ProtocolOrder("no refresh in progress".into())),
            }
        };
        let e = self.enrollment()?;
        if read_u32(f.field("epoch"), "epoch")? != pending.epoch
            || read_byte(f.field("role"), "role")? != e.role().peer().as_byte()
        {
            return Err(Error::ProtocolOrder("unexpected refresh shares".into()));
        }
        let held = G::decode_scalar(f.field("sub_share"))?;
        let pk = match e.role() {
            Role::Primary => {
                // The secondary moved by the opposite of our delta.
                let pk = G::decode_element(f.field("public_key"))?;
                if pk != e.pk - pending.delta * G::generator() || pk == G::identity() {
                    return Err(Error::State("refreshed public key does not match".into()));
                }
                pk
            }
            Role::Secondary => pending.pk,
        };
        let next = Enrollment {
            account: e.account.clone(),
            epoch: pending.epoch,
            shares: pending.shares.clone(),
            held,
            pk,
            catalog_key: e.catalog_key.clone(),
        };
        self.deposit(&next, f.flow, f.session, vec![])?;
        self.state.lock().unwrap().enrollment = Some(next);
        self.save()?;
        Ok(Frame::ok(f.flow, f.session))
    }

    // ---- migration and recovery ----

    /// Makes this (new, unenrolled, logged-in) device take over role `which`.
    ///
    /// The cloud either asks the old device to approve (`Migrate`) or, when
    /// the old device is gone, checks an identity proof built from
    /// `recovery_secret` (`Recover`). It then releases the vault sub-share
    /// and tells the surviving device to release its sub-share. The new
    /// device rebuilds the share and immediately refreshes with the
    /// survivor, which re-randomizes every share and sub-share.
    pub fn replace(&self, mode: RecoveryMode, which: Role, recovery_secret: Option<&[u8]>) -> Result<()> {
        let _guard = self.flow_lock.lock().unwrap();
        if self.state.lock().unwrap().enrollment.is_some() {
            return Err(Error::DuplicateEnrollment);
        }
        let account = self.account()?;
        let me = self.info();
        let session = new_session();
        let binding = vec![
            vec![mode as u8],
            vec![which.as_byte()],
            me.device_id.clone().into_bytes(),
            me.addr.clone().into_bytes(),
            me.identity.0.to_vec(),
        ];
        let mut req = vec![self.token()?];
        req.extend(binding.iter().cloned());
        let r = self.call_cloud(&Frame::new(mode.flow(), session, MsgType::RecoverReq, req))?;
        let release = if r.kind == MsgType::VerifyChallenge {
            let nonce: [u8; 32] = read_array(r.field("nonce"), "nonce")?;
            let secret = recovery_secret.ok_or(Error::VerificationFailed)?;
            let mac = identity_proof(secret, &nonce, &account, which, &me.device_id, &me.identity);
            self.call_cloud(&Frame::new(
                mode.flow(),
                session,
                MsgType::VerifyIdentity,
                vec![self.token()?, nonce.to_vec(), mac.to_vec()],
            ))?
            .expect(MsgType::ShareRelease)?
        } else {
            r.expect(MsgType::ShareRelease)?
        };
        let cloud_sub = G::decode_scalar(release.field("sub_share"))?;
        let epoch = read_u32(release.field("epoch"), "epoch")?;
        let wrapped = release.field("wrapped_catalog_key").to_vec();
        let survivor = PeerInfo {
            device_id: read_string(release.field("peer_device_id"), "peer id")?,
            addr: read_string(release.field("peer_addr"), "peer address")?,
            identity: PeerKey::from_slice(release.field("peer_identity"))?,
        };
        self.set_peer(survivor);

        let mut req = vec![vec![]];
        req.extend(binding);
        let s = self
            .call_peer(&Frame::new(mode.flow(), session, MsgType::RecoverReq, req))?
            .expect(MsgType::ShareRelease)?;
        if read_u32(s.field("epoch"), "epoch")? != epoch {
            return Err(Error::State("survivor and cloud disagree on the epoch".into()));
        }
        let peer_sub = G::decode_scalar(s.field("sub_share"))?;
        let own = cloud_sub + peer_sub;
        let pk = match which {
            Role::Secondary => own * G::generator(),
            Role::Primary => G::decode_element(s.field("public_key"))?,
        };
        let e = Enrollment {
            account,
            epoch,
            shares: ShareSet {
                role: which,
                own_share: own,
                sub_share_peer: peer_sub,
                sub_share_cloud: cloud_sub,
            },
            // Replaced by the survivor's fresh sub-share in the refresh below.
            held: G::scalar_from_u64(0),
            pk,
            catalog_key: CatalogKey::from_slice(s.field("catalog_key"))?,
        };
        if which == Role::Primary {
            // A wrong share would derive a different wrapping key.
            let key = self.derive_with(&e, mode.flow(), session, &CATALOG_WRAP_TAG, &ZERO_SEED)?;
            let unwrapped = file_crypto::open(&key, &CATALOG_WRAP_TAG, &wrapped)
                .map_err(|_| Error::State("recovered share does not unwrap the catalog key".into()))?;
            if unwrapped[..] != e.catalog_key.as_bytes()[..] {
                return Err(Error::State("catalog key mismatch".into()));
            }
        }
        self.state.lock().unwrap().enrollment = Some(e);
        self.save()?;
        self.refresh_locked()
    }

    fn on_recover_grant(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_cloud(caller)?;
        let e = self.enrollment()?;
        let mode = RecoveryMode::from_byte(read_byte(f.field("mode"), "mode")?)?;
        let which = Role::from_byte(read_byte(f.field("which"), "which")?)
            .ok_or_else(|| Error::Malformed("which".into()))?;
        let epoch = read_u32(f.field("epoch"), "epoch")?;
        if which != e.role().peer() {
            return Err(Error::Malformed("grant names this device's own role".into()));
        }
        if epoch != e.epoch {
            return Err(Error::State(format!(
                "grant for epoch {epoch}, device at {}",
                e.epoch
            )));
        }
        let device = PeerInfo {
            device_id: read_string(f.field("device_id"), "device id")?,
            addr: read_string(f.field("addr"), "address")?,
            identity: PeerKey::from_slice(f.field("identity"))?,
        };
        self.gate.recovery_attempted(&format!(
            "peer replaced by {} ({})",
            device.device_id,
            &device.identity.to_hex()[..16]
        ));
        let mut grants = self.grants.lock().unwrap();
        grants.retain(|g| g.which != which);
        grants.push(Grant {
            mode,
            which,
            device,
            epoch,
        });
        Ok(Frame::ok(f.flow, f.session))
    }

    fn on_recover_req(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        let e = self.enrollment()?;
        let mode = RecoveryMode::from_byte(read_byte(f.field("mode"), "mode")?)?;
        let which = Role::from_byte(read_byte(f.field("which"), "which")?)
            .ok_or_else(|| Error::Malformed("which".into()))?;
        let grant = {
            let mut grants = self.grants.lock().unwrap();
            let i = grants
                .iter()
                .position(|g| g.device.identity == caller.identity && g.which == which && g.mode == mode)
                .ok_or_else(|| Error::ProtocolOrder("no recovery grant for this device".into()))?;
            grants.remove(i)
        };
        if grant.epoch != e.epoch {
            return Err(Error::State("epoch moved since the grant".into()));
        }
        self.state.lock().unwrap().peer = Some(grant.device);
        self.save()?;
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::ShareRelease,
            vec![
                scalar_bytes(&e.held),
                u32_field(e.epoch),
                if e.role() == Role::Secondary {
                    G::encode_element(&e.pk)
                } else {
                    vec![]
                },
                e.catalog_key.as_bytes().to_vec(),
                vec![],
                vec![],
                vec![],
                vec![],
            ],
        ))
    }

    fn on_auth_ping(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        self.check_cloud(caller)?;
        let mode = RecoveryMode::from_byte(read_byte(f.field("mode"), "mode")?)?;
        let device_id = read_string(f.field("device_id"), "device id")?;
        let identity = PeerKey::from_slice(f.field("identity"))?;
        let fingerprint = identity.to_hex()[..16].to_owned();
        let answer = match mode {
            RecoveryMode::Recover => {
                self.gate.recovery_attempted(&fingerprint);
                PingAnswer::Alive
            }
            RecoveryMode::Migrate => {
                let detail = format!("replace this device with {device_id} ({fingerprint})");
                if self.enrollment().is_ok() && self.gate.authorize_migration(&fingerprint, &detail) {
                    self.retire()?;
                    PingAnswer::Approve
                } else {
                    PingAnswer::Deny
                }
            }
        };
        Ok(Frame::new(
            f.flow,
            f.session,
            MsgType::AuthApprove,
            vec![vec![answer as u8]],
        ))
    }

    /// Wipes this device's key material after it approved its replacement.
    fn retire(&self) -> Result<()> {
        {
            let mut st = self.state.lock().unwrap();
            st.enrollment = None;
            st.token = None;
            st.retired = true;
        }
        self.save()
    }

    fn dispatch(&self, caller: &Caller, f: &Frame) -> Result<Frame> {
        match (f.kind, f.flow) {
            (MsgType::EnrollShares, Flow::Enroll) => self.on_enroll(caller, f),
            (MsgType::EnrollShares, Flow::Refresh) => self.on_refresh_shares(caller, f),
            (MsgType::RefreshDelta, Flow::Refresh) => self.on_refresh_delta(caller, f),
            (MsgType::SrCommit, _) => self.on_sr_commit(caller, f),
            (MsgType::SrReveal, _) => self.on_sr_reveal(caller, f),
            (MsgType::TprfReq, _) => self.on_tprf(caller, f),
            (MsgType::AuthPing, _) => self.on_auth_ping(caller, f),
            (MsgType::RecoverGrant, _) => self.on_recover_grant(caller, f),
            (MsgType::RecoverReq, Flow::Migrate | Flow::Recover) => self.on_recover_req(caller, f),
            (kind, flow) => Err(Error::ProtocolOrder(format!(
                "{} in {} flow",
                kind.name(),
                flow.name()
            ))),
        }
    }
}

impl Endpoint for Device {
    fn handle(&self, caller: &Caller, frame: Frame) -> Frame {
        if let Err(e) = self.reload_if_changed() {
            return Frame::error(frame.flow, frame.session, &e);
        }
        let hooks = self.hooks.read().unwrap();
        if let Some(intercept) = &hooks.intercept {
            if let Some(r) = intercept(caller, &frame) {
                return r;
            }
        }
        drop(hooks);
        let mut r = self
            .dispatch(caller, &frame)
            .unwrap_or_else(|e| Frame::error(frame.flow, frame.session, &e));
        if let Some(tamper) = &self.hooks.read().unwrap().tamper {
            tamper(&mut r);
        }
        r
    }
}
