//! Request/response links between parties.
//!
//! Every exchange is one request frame answered by one response frame. A
//! party serving requests implements [`Endpoint`]; a party making them holds
//! a [`Link`] obtained from a [`Dialer`]. The in-process [`Network`] routes
//! frames by address through their byte encoding and records a wire log; the
//! TCP transport lives in [`crate::channel`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::wire::{Frame, MsgType, SessionId};

/// Encoded identity public key of a party.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerKey(pub [u8; 32]);

impl PeerKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        Ok(PeerKey(crate::wire::read_array(bytes, "identity key")?))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|_| Error::Malformed("identity key hex".into()))?;
        Self::from_slice(&bytes)
    }
}

impl std::fmt::Debug for PeerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PeerKey({})", hex::encode(&self.0[..6]))
    }
}

/// Who sent a request, as authenticated by the transport.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caller {
    pub identity: PeerKey,
}

pub trait Endpoint: Send + Sync {
    /// Serves one request. Failures are returned as ERROR frames.
    fn handle(&self, caller: &Caller, frame: Frame) -> Frame;
}

pub trait Link: Send + Sync {
    fn call(&self, frame: &Frame) -> Result<Frame>;
}

pub trait Dialer: Send + Sync {
    /// Opens a link to `addr`. With `expect` set, the remote party must prove
    /// possession of that identity key. `timeout` bounds each call.
    fn dial(
        &self,
        addr: &str,
        expect: Option<&PeerKey>,
        timeout: Option<Duration>,
    ) -> Result<Arc<dyn Link>>;
}

/// One request/response exchange as seen on the wire.
#[derive(Clone, Debug)]
pub struct WireRecord {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub request: Vec<u8>,
    pub response: Vec<u8>,
}

impl WireRecord {
    pub fn request_frame(&self) -> Frame {
        Frame::decode(&self.request).expect("logged frames decode")
    }

    pub fn response_frame(&self) -> Frame {
        Frame::decode(&self.response).expect("logged frames decode")
    }
}

/// Append-only log of plaintext frames crossing the in-process network.
#[derive(Default)]
pub struct WireLog {
    records: Mutex<Vec<WireRecord>>,
    seq: AtomicU64,
    disabled: AtomicBool,
}

impl WireLog {
    pub fn set_enabled(&self, on: bool) {
        self.disabled.store(!on, Ordering::SeqCst);
    }

    fn record(&self, from: &str, to: &str, request: Vec<u8>, response: Vec<u8>) {
        if self.disabled.load(Ordering::SeqCst) {
            return;
        }
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        self.records.lock().unwrap().push(WireRecord {
            seq,
            from: from.to_owned(),
            to: to.to_owned(),
            request,
            response,
        });
    }

    pub fn records(&self) -> Vec<WireRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.records.lock().unwrap().clear();
    }

    /// Frames of `kind` sent in either direction.
    pub fn count(&self, kind: MsgType) -> usize {
        self.records
            .lock()
            .unwrap()
            .iter()
            .flat_map(|r| [&r.request, &r.response])
            .filter(|bytes| bytes.get(18) == Some(&(kind as u8)))
            .count()
    }

    /// Message types exchanged between `a` and `b` in one session, in order,
    /// excluding bare OK acknowledgements.
    pub fn session_messages(&self, session: &SessionId, a: &str, b: &str) -> Vec<MsgType> {
        let mut out = Vec::new();
        for r in self.records.lock().unwrap().iter() {
            let between = (r.from == a && r.to == b) || (r.from == b && r.to == a);
            if !between || r.request[2..18] != session[..] {
                continue;
            }
            for bytes in [&r.request, &r.response] {
                let kind = MsgType::from_byte(bytes[18]).unwrap();
                if kind != MsgType::Ok {
                    out.push(kind);
                }
            }
        }
        out
    }
}

struct Node {
    endpoint: Weak<dyn Endpoint>,
    identity: PeerKey,
    online: bool,
}

/// In-process network keyed by address string.
#[derive(Default)]
pub struct Network {
    nodes: Mutex<HashMap<String, Node>>,
    log: WireLog,
}

impl Network {
    pub fn new() -> Arc<Self> {
        Arc::new(Network::default())
    }

    pub fn attach(&self, addr: &str, identity: PeerKey, endpoint: Arc<dyn Endpoint>) {
        self.nodes.lock().unwrap().insert(
            addr.to_owned(),
            Node {
                endpoint: Arc::downgrade(&endpoint),
                identity,
                online: true,
            },
        );
    }

    pub fn detach(&self, addr: &str) {
        self.nodes.lock().unwrap().remove(addr);
    }

    pub fn set_online(&self, addr: &str, online: bool) {
        if let Some(n) = self.nodes.lock().unwrap().get_mut(addr) {
            n.online = online;
        }
    }

    pub fn is_online(&self, addr: &str) -> bool {
        self.nodes
            .lock()
            .unwrap()
            .get(addr)
            .is_some_and(|n| n.online)
    }

    pub fn log(&self) -> &WireLog {
        &self.log
    }

    /// A dialer for the party at `addr` with identity `identity`.
    pub fn dialer(self: &Arc<Self>, addr: &str, identity: PeerKey) -> Arc<dyn Dialer> {
        Arc::new(NetDialer {
            net: Arc::clone(self),
            from: addr.to_owned(),
            identity,
        })
    }

    fn route(&self, to: &str) -> Result<(Arc<dyn Endpoint>, PeerKey)> {
        let nodes = self.nodes.lock().unwrap();
        let node = nodes.get(to).filter(|n| n.online).ok_or(Error::PeerUnreachable)?;
        let ep = node.endpoint.upgrade().ok_or(Error::PeerUnreachable)?;
        Ok((ep, node.identity))
    }
}

struct NetDialer {
    net: Arc<Network>,
    from: String,
    identity: PeerKey,
}

impl Dialer for NetDialer {
    fn dial(
        &self,
        addr: &str,
        expect: Option<&PeerKey>,
        _timeout: Option<Duration>,
    ) -> Result<Arc<dyn Link>> {
        let (_, identity) = self.net.route(addr)?;
        if expect.is_some_and(|e| *e != identity) {
            return Err(Error::PeerUnreachable);
        }
        Ok(Arc::new(NetLink {
            net: Arc::clone(&self.net),
            from: self.from.clone(),
            caller: Caller {
                identity: self.identity,
            },
            to: addr.to_owned(),
        }))
    }
}

struct NetLink {
    net: Arc<Network>,
    from: String,
    caller: Caller,
    to: String,
}

impl Link for NetLink {
    fn call(&self, frame: &Frame) -> Result<Frame> {
        if !self.net.is_online(&self.from) {
            return Err(Error::PeerUnreachable);
        }
        let (ep, _) = self.net.route(&self.to)?;
        let request = frame.encode();
        let response = ep.handle(&self.caller, Frame::decode(&request)?).encode();
        self.net
            .log
            .record(&self.from, &self.to, request, response.clone());
        Frame::decode(&response)
    }
}
