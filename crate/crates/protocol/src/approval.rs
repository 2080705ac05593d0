//! Approval policy and the queue of requests waiting for the user.
//!
//! The secondary consults the policy before answering a decryption request;
//! either device consults it before authorizing its own replacement. Prompts
//! land in an [`ApprovalQueue`] that the local console renders and decides.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{ms, Clock};
use crate::error::{Error, Result};

pub const REQUEST_EXPIRY: Duration = Duration::from_secs(120);
pub const NOTIFICATION_RETENTION: Duration = Duration::from_secs(90 * 24 * 3600);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Auto,
    Notify,
    Prompt,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "auto" => Ok(Mode::Auto),
            "notify" => Ok(Mode::Notify),
            "prompt" => Ok(Mode::Prompt),
            other => Err(Error::Malformed(format!("unknown policy mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Auto => "auto",
            Mode::Notify => "notify",
            Mode::Prompt => "prompt",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalPolicy {
    pub mode: Mode,
    /// Path prefix → mode. The longest matching prefix wins.
    #[serde(default)]
    pub folders: BTreeMap<String, Mode>,
    /// A prompt approval for a tag also covers repeat requests for the same
    /// tag within this window.
    #[serde(default, with = "duration_secs")]
    pub approval_window: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

impl Default for ApprovalPolicy {
    fn default() -> Self {
        ApprovalPolicy::new(Mode::Notify)
    }
}

impl ApprovalPolicy {
    pub fn new(mode: Mode) -> Self {
        ApprovalPolicy {
            mode,
            folders: BTreeMap::new(),
            approval_window: Duration::ZERO,
        }
    }

    pub fn with_folder(mut self, prefix: &str, mode: Mode) -> Self {
        self.folders.insert(prefix.to_owned(), mode);
        self
    }

    pub fn with_window(mut self, window: Duration) -> Self {
        self.approval_window = window;
        self
    }

    /// Mode for a file. When the name is unknown the strictest configured
    /// mode applies, so an unresolved name can never weaken a folder rule.
    pub fn mode_for(&self, filename: Option<&str>) -> Mode {
        match filename {
            Some(name) => self
                .folders
                .iter()
                .filter(|(prefix, _)| name.starts_with(prefix.as_str()))
                .max_by_key(|(prefix, _)| prefix.len())
                .map_or(self.mode, |(_, m)| *m),
            None => self.folders.values().copied().fold(self.mode, Mode::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    Decrypt,
    MigrateAuth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Pending,
    Approved,
    Denied,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub id: u64,
    pub kind: RequestKind,
    /// Tag hex for decryptions, new-device fingerprint for migrations.
    pub tag: String,
    pub filename: Option<String>,
    pub detail: String,
    pub requested_at_ms: u64,
    pub expires_at_ms: u64,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub at_ms: u64,
    pub kind: RequestKind,
    pub tag: String,
    pub filename: Option<String>,
    pub outcome: String,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    Request(PendingRequest),
    Decided(PendingRequest),
    Notification(Notification),
}

/// Scripted stand-in for the user: returns `Some(approve)` to decide a new
/// request immediately, `None` to leave it pending.
pub type Responder = Box<dyn Fn(&PendingRequest) -> Option<bool> + Send + Sync>;

#[derive(Default)]
struct QueueState {
    next_id: u64,
    requests: BTreeMap<u64, PendingRequest>,
    notifications: Vec<Notification>,
    approved_at: HashMap<String, u64>,
}

pub struct ApprovalQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
    clock: Arc<dyn Clock>,
    subscribers: Mutex<Vec<Sender<Event>>>,
    responder: Mutex<Option<Arc<Responder>>>,
    log_path: Option<PathBuf>,
}

impl ApprovalQueue {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        ApprovalQueue {
            state: Mutex::new(QueueState {
                next_id: 1,
                ..QueueState::default()
            }),
            changed: Condvar::new(),
            clock,
            subscribers: Mutex::new(Vec::new()),
            responder: Mutex::new(None),
            log_path: None,
        }
    }

    /// Queue whose notifications are appended to `path` as JSON lines and
    /// reloaded from it.
    pub fn with_log(clock: Arc<dyn Clock>, path: PathBuf) -> Result<Self> {
        let mut q = ApprovalQueue::new(clock);
        if path.exists() {
            let file = std::fs::File::open(&path)?;
            let mut st = q.state.lock().unwrap();
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let n: Notification = serde_json::from_str(&line)
                    .map_err(|e| Error::State(format!("notification log: {e}")))?;
                st.notifications.push(n);
            }
            drop(st);
        }
        q.log_path = Some(path);
        Ok(q)
    }

    pub fn set_responder(&self, r: Option<Responder>) {
        *self.responder.lock().unwrap() = r.map(Arc::new);
    }

    pub fn subscribe(&self) -> Receiver<Event> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.lock().unwrap().push(tx);
        rx
    }

    fn publish(&self, e: Event) {
        self.subscribers
            .lock()
            .unwrap()
            .retain(|tx| tx.send(e.clone()).is_ok());
    }

    fn expire(&self, st: &mut QueueState) -> Vec<PendingRequest> {
        let now = self.clock.now_ms();
        let mut expired = Vec::new();
        for r in st.requests.values_mut() {
            if r.decision == Decision::Pending && now >= r.expires_at_ms {
                r.decision = Decision::Expired;
                expired.push(r.clone());
            }
        }
        expired
    }

    pub fn submit(
        &self,
        kind: RequestKind,
        tag: String,
        filename: Option<String>,
        detail: String,
    ) -> PendingRequest {
        let now = self.clock.now_ms();
        let req = {
            let mut st = self.state.lock().unwrap();
            let id = st.next_id;
            st.next_id += 1;
            let req = PendingRequest {
                id,
                kind,
                tag,
                filename,
                detail,
                requested_at_ms: now,
                expires_at_ms: now + ms(REQUEST_EXPIRY),
                decision: Decision::Pending,
            };
            st.requests.insert(id, req.clone());
            req
        };
        self.publish(Event::Request(req.clone()));
        let responder = self.responder.lock().unwrap().clone();
        if let Some(answer) = responder.and_then(|r| r(&req)) {
            let _ = self.decide(req.id, answer);
        }
        req
    }

    /// Blocks until the request is decided or expires.
    pub fn wait(&self, id: u64) -> Decision {
        let mut st = self.state.lock().unwrap();
        loop {
            for r in self.expire(&mut st) {
                self.publish(Event::Decided(r));
            }
            match st.requests.get(&id).map(|r| r.decision) {
                None => return Decision::Denied,
                Some(Decision::Pending) => {}
                Some(d) => return d,
            }
            st = self
                .changed
                .wait_timeout(st, Duration::from_millis(20))
                .unwrap()
                .0;
        }
    }

    pub fn decide(&self, id: u64, approve: bool) -> Result<PendingRequest> {
        let decided = {
            let mut st = self.state.lock().unwrap();
            self.expire(&mut st);
            let r = st.requests.get_mut(&id).ok_or(Error::UnknownRequest)?;
            if r.decision != Decision::Pending {
                return Err(Error::AlreadyDecided);
            }
            r.decision = if approve {
                Decision::Approved
            } else {
                Decision::Denied
            };
            let r = r.clone();
            if approve && r.kind == RequestKind::Decrypt {
                st.approved_at.insert(r.tag.clone(), self.clock.now_ms());
            }
            r
        };
        self.changed.notify_all();
        self.publish(Event::Decided(decided.clone()));
        Ok(decided)
    }

    pub fn get(&self, id: u64) -> Option<PendingRequest> {
        let mut st = self.state.lock().unwrap();
        self.expire(&mut st);
        st.requests.get(&id).cloned()
    }

    pub fn pending(&self) -> Vec<PendingRequest> {
        let mut st = self.state.lock().unwrap();
        self.expire(&mut st);
        st.requests
            .values()
            .filter(|r| r.decision == Decision::Pending)
            .cloned()
            .collect()
    }

    pub fn requests(&self) -> Vec<PendingRequest> {
        let mut st = self.state.lock().unwrap();
        self.expire(&mut st);
        st.requests.values().cloned().collect()
    }

    fn approved_within(&self, tag: &str, window: Duration) -> bool {
        if window.is_zero() {
            return false;
        }
        let st = self.state.lock().unwrap();
        st.approved_at
            .get(tag)
            .is_some_and(|t| self.clock.now_ms() < t + ms(window))
    }

    pub fn notify(&self, n: Notification) {
        {
            let mut st = self.state.lock().unwrap();
            let cutoff = self.clock.now_ms().saturating_sub(ms(NOTIFICATION_RETENTION));
            st.notifications.retain(|x| x.at_ms >= cutoff);
            st.notifications.push(n.clone());
        }
        if let Some(path) = &self.log_path {
            let line = serde_json::to_string(&n).expect("notification serializes");
            if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
                let _ = writeln!(f, "{line}");
            }
        }
        self.publish(Event::Notification(n));
    }

    /// Notifications within the retention period, oldest first.
    pub fn notifications(&self) -> Vec<Notification> {
        let st = self.state.lock().unwrap();
        let cutoff = self.clock.now_ms().saturating_sub(ms(NOTIFICATION_RETENTION));
        st.notifications
            .iter()
            .filter(|n| n.at_ms >= cutoff)
            .cloned()
            .collect()
    }
}

/// Policy plus queue: the enforcement point on a device.
pub struct Gate {
    policy: Mutex<ApprovalPolicy>,
    queue: ApprovalQueue,
}

impl Gate {
    pub fn new(policy: ApprovalPolicy, queue: ApprovalQueue) -> Self {
        Gate {
            policy: Mutex::new(policy),
            queue,
        }
    }

    pub fn queue(&self) -> &ApprovalQueue {
        &self.queue
    }

    pub fn policy(&self) -> ApprovalPolicy {
        self.policy.lock().unwrap().clone()
    }

    pub fn set_policy(&self, p: ApprovalPolicy) {
        *self.policy.lock().unwrap() = p;
    }

    fn note(&self, kind: RequestKind, tag: &str, filename: Option<&str>, outcome: &str) {
        self.queue.notify(Notification {
            at_ms: self.queue.clock.now_ms(),
            kind,
            tag: tag.to_owned(),
            filename: filename.map(str::to_owned),
            outcome: outcome.to_owned(),
        });
    }

    /// Decides whether a decryption request for `tag` may be answered.
    /// Blocks while a prompt is pending.
    pub fn authorize_decrypt(&self, tag: &str, filename: Option<&str>) -> Result<()> {
        let policy = self.policy();
        match policy.mode_for(filename) {
            Mode::Auto => Ok(()),
            Mode::Notify => {
                self.note(RequestKind::Decrypt, tag, filename, "derived");
                Ok(())
            }
            Mode::Prompt => {
                if self.queue.approved_within(tag, policy.approval_window) {
                    self.note(RequestKind::Decrypt, tag, filename, "approved-within-window");
                    return Ok(());
                }
                let req = self.queue.submit(
                    RequestKind::Decrypt,
                    tag.to_owned(),
                    filename.map(str::to_owned),
                    String::new(),
                );
                match self.queue.wait(req.id) {
                    Decision::Approved => Ok(()),
                    _ => Err(Error::PolicyDenied),
                }
            }
        }
    }

    /// Asks the user whether this device may be replaced by the device
    /// described in `detail`. Auto mode approves without asking.
    pub fn authorize_migration(&self, fingerprint: &str, detail: &str) -> bool {
        if self.policy().mode == Mode::Auto {
            self.note(RequestKind::MigrateAuth, fingerprint, None, "auto-approved");
            return true;
        }
        let req = self.queue.submit(
            RequestKind::MigrateAuth,
            fingerprint.to_owned(),
            None,
            detail.to_owned(),
        );
        self.queue.wait(req.id) == Decision::Approved
    }

    /// Records that a recovery of this device was attempted while it was
    /// still alive.
    pub fn recovery_attempted(&self, fingerprint: &str) {
        self.note(RequestKind::MigrateAuth, fingerprint, None, "recovery-attempt-while-alive");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use std::thread;

    fn gate(policy: ApprovalPolicy) -> (Arc<Gate>, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_000));
        let g = Arc::new(Gate::new(policy, ApprovalQueue::new(clock.clone())));
        (g, clock)
    }

    #[test]
    fn longest_prefix_wins_and_unknown_name_is_strictest() {
        let p = ApprovalPolicy::new(Mode::Auto)
            .with_folder("docs/", Mode::Notify)
            .with_folder("docs/tax/", Mode::Prompt);
        assert_eq!(p.mode_for(Some("pics/a.png")), Mode::Auto);
        assert_eq!(p.mode_for(Some("docs/a.txt")), Mode::Notify);
        assert_eq!(p.mode_for(Some("docs/tax/2024.pdf")), Mode::Prompt);
        assert_eq!(p.mode_for(None), Mode::Prompt);
        assert_eq!(ApprovalPolicy::default().mode, Mode::Notify);
    }

    #[test]
    fn prompt_blocks_until_decided() {
        let (g, _) = gate(ApprovalPolicy::new(Mode::Prompt));
        let rx = g.queue().subscribe();
        let g2 = Arc::clone(&g);
        let h = thread::spawn(move || g2.authorize_decrypt("aa", Some("f")));
        let Event::Request(req) = rx.recv().unwrap() else {
            panic!("expected request event")
        };
        assert_eq!(g.queue().pending().len(), 1);
        g.queue().decide(req.id, false).unwrap();
        assert_eq!(h.join().unwrap(), Err(Error::PolicyDenied));
        assert_eq!(g.queue().decide(req.id, true), Err(Error::AlreadyDecided));
        assert_eq!(g.queue().decide(999, true), Err(Error::UnknownRequest));
    }

    #[test]
    fn requests_expire_as_denied() {
        let (g, clock) = gate(ApprovalPolicy::new(Mode::Prompt));
        let rx = g.queue().subscribe();
        let g2 = Arc::clone(&g);
        let h = thread::spawn(move || g2.authorize_decrypt("aa", None));
        let Event::Request(req) = rx.recv().unwrap() else {
            panic!()
        };
        clock.advance(REQUEST_EXPIRY);
        assert_eq!(h.join().unwrap(), Err(Error::PolicyDenied));
        assert_eq!(g.queue().get(req.id).unwrap().decision, Decision::Expired);
        assert_eq!(g.queue().decide(req.id, true), Err(Error::AlreadyDecided));
    }

    #[test]
    fn approval_window_covers_repeats_of_same_tag() {
        let (g, clock) =
            gate(ApprovalPolicy::new(Mode::Prompt).with_window(Duration::from_secs(60)));
        g.queue().set_responder(Some(Box::new(|_| Some(true))));
        g.authorize_decrypt("aa", None).unwrap();
        g.queue().set_responder(Some(Box::new(|_| Some(false))));
        clock.advance(Duration::from_secs(30));
        g.authorize_decrypt("aa", None).unwrap();
        assert_eq!(g.authorize_decrypt("bb", None), Err(Error::PolicyDenied));
        clock.advance(Duration::from_secs(31));
        assert_eq!(g.authorize_decrypt("aa", None), Err(Error::PolicyDenied));
        assert_eq!(g.queue().requests().len(), 3);
    }

    #[test]
    fn notify_mode_logs_and_retains_ninety_days() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let clock = Arc::new(ManualClock::new(1_000));
        let g = Gate::new(
            ApprovalPolicy::default(),
            ApprovalQueue::with_log(clock.clone(), path.clone()).unwrap(),
        );
        g.authorize_decrypt("aa", Some("a.txt")).unwrap();
        g.authorize_decrypt("bb", None).unwrap();
        assert_eq!(g.queue().notifications().len(), 2);

        let reloaded = ApprovalQueue::with_log(clock.clone(), path).unwrap();
        assert_eq!(reloaded.notifications().len(), 2);
        assert_eq!(reloaded.notifications()[0].filename.as_deref(), Some("a.txt"));

        clock.advance(NOTIFICATION_RETENTION + Duration::from_secs(1));
        assert!(g.queue().notifications().is_empty());
    }

    #[test]
    fn migration_prompts_unless_auto() {
        let (g, _) = gate(ApprovalPolicy::new(Mode::Auto));
        assert!(g.authorize_migration("fp", "new device"));
        assert!(g.queue().requests().is_empty());
        g.set_policy(ApprovalPolicy::new(Mode::Notify));
        g.queue().set_responder(Some(Box::new(|r| {
            Some(r.kind == RequestKind::MigrateAuth && r.detail == "new device")
        })));
        assert!(g.authorize_migration("fp", "new device"));
        assert!(!g.authorize_migration("fp", "other"));
    }
}
