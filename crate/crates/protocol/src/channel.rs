//! Authenticated encrypted TCP transport.
//!
//! Handshake: each side sends its static identity key and a fresh ephemeral
//! key. Both derive traffic keys from `e·E'`, `e_c·S_s` and `s_c·E_s` plus the
//! transcript, so only holders of both static secrets end up with matching
//! keys. The client checks the server's static key against the one it
//! expects; the server hands the client's static key to the endpoint as the
//! authenticated caller. Records are `u32 BE length ‖ ChaCha20-Poly1305
//! ciphertext` with a per-direction counter nonce.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand_core::{CryptoRng, OsRng, RngCore};
use sha2::{Digest, Sha512};
use zeroize::Zeroizing;

use twofe_core::group::{frame_parts, random_scalar, PrimeGroup, Ristretto255};

use crate::error::{Error, Result};
use crate::transport::{Caller, Dialer, Endpoint, Link, PeerKey};
use crate::wire::Frame;

type G = Ristretto255;
type Scalar = <G as PrimeGroup>::Scalar;

const HELLO_MAGIC: &[u8; 8] = b"2FE-CH01";
const MAX_RECORD: usize = 512 << 20;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// A party's long-term key pair.
pub struct IdentityKey {
    secret: Zeroizing<[u8; 32]>,
    scalar: Scalar,
    public: PeerKey,
}

impl IdentityKey {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Result<Self> {
        let s = random_scalar::<G, R>(rng)?;
        Ok(Self::from_scalar(s))
    }

    fn from_scalar(scalar: Scalar) -> Self {
        let secret: [u8; 32] = G::encode_scalar(&scalar).try_into().unwrap();
        let public = PeerKey(G::encode_element(&(scalar * G::generator())).try_into().unwrap());
        IdentityKey {
            secret: Zeroizing::new(secret),
            scalar,
            public,
        }
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_scalar(G::decode_scalar(bytes)?))
    }

    pub fn secret_bytes(&self) -> &[u8; 32] {
        &self.secret
    }

    pub fn public(&self) -> PeerKey {
        self.public
    }
}

impl std::fmt::Debug for IdentityKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "IdentityKey({:?})", self.public)
    }
}

/// Six-digit code both devices display during pairing.
pub fn pairing_code(primary: &PeerKey, secondary: &PeerKey) -> String {
    let d = Sha512::digest(frame_parts(b"2FE-PAIR", [&primary.0[..], &secondary.0[..]]));
    let n = u32::from_be_bytes(d[..4].try_into().unwrap()) % 1_000_000;
    format!("{n:06}")
}

fn point(key: &[u8]) -> Result<<G as PrimeGroup>::Element> {
    G::decode_element(key).map_err(|_| Error::PeerUnreachable)
}

struct Keys {
    send: ChaCha20Poly1305,
    recv: ChaCha20Poly1305,
}

fn derive_keys(shared: [&[u8]; 3], transcript: &[u8], client: bool) -> Keys {
    let parts = [shared[0], shared[1], shared[2], transcript];
    let okm: Zeroizing<[u8; 64]> =
        Zeroizing::new(Sha512::digest(frame_parts(b"2FE-CHANNEL", parts)).into());
    let c2s = ChaCha20Poly1305::new(Key::from_slice(&okm[..32]));
    let s2c = ChaCha20Poly1305::new(Key::from_slice(&okm[32..]));
    if client {
        Keys {
            send: c2s,
            recv: s2c,
        }
    } else {
        Keys {
            send: s2c,
            recv: c2s,
        }
    }
}

/// An established channel.
pub struct SecureStream {
    stream: TcpStream,
    keys: Keys,
    send_ctr: u64,
    recv_ctr: u64,
    remote: PeerKey,
}

fn nonce(ctr: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&ctr.to_be_bytes());
    Nonce::from(n)
}

impl SecureStream {
    fn hello(identity: &IdentityKey, eph: &Scalar) -> Vec<u8> {
        let mut h = HELLO_MAGIC.to_vec();
        h.extend_from_slice(&identity.public.0);
        h.extend_from_slice(&G::encode_element(&(*eph * G::generator())));
        h
    }

    fn read_hello(stream: &mut TcpStream) -> Result<(Vec<u8>, PeerKey, <G as PrimeGroup>::Element)> {
        let mut buf = vec![0u8; 8 + 64];
        stream.read_exact(&mut buf).map_err(|_| Error::PeerUnreachable)?;
        if &buf[..8] != HELLO_MAGIC {
            return Err(Error::PeerUnreachable);
        }
        let stat = PeerKey::from_slice(&buf[8..40])?;
        let eph = point(&buf[40..72])?;
        Ok((buf, stat, eph))
    }

    pub fn connect(
        mut stream: TcpStream,
        identity: &IdentityKey,
        expect: Option<&PeerKey>,
    ) -> Result<SecureStream> {
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).ok();
        let e = random_scalar::<G, _>(&mut OsRng)?;
        let mine = Self::hello(identity, &e);
        stream.write_all(&mine).map_err(|_| Error::PeerUnreachable)?;
        let (theirs, server_static, server_eph) = Self::read_hello(&mut stream)?;
        if expect.is_some_and(|k| *k != server_static) {
            return Err(Error::PeerUnreachable);
        }
        let s_static = point(&server_static.0)?;
        let ee = G::encode_element(&(e * server_eph));
        let es = G::encode_element(&(e * s_static));
        let se = G::encode_element(&(identity.scalar * server_eph));
        let transcript = [mine, theirs].concat();
        Ok(SecureStream {
            stream,
            keys: derive_keys([&ee, &es, &se], &transcript, true),
            send_ctr: 0,
            recv_ctr: 0,
            remote: server_static,
        })
    }

    pub fn accept(mut stream: TcpStream, identity: &IdentityKey) -> Result<SecureStream> {
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).ok();
        let (theirs, client_static, client_eph) = Self::read_hello(&mut stream)?;
        let e = random_scalar::<G, _>(&mut OsRng)?;
        let mine = Self::hello(identity, &e);
        stream.write_all(&mine).map_err(|_| Error::PeerUnreachable)?;
        let c_static = point(&client_static.0)?;
        let ee = G::encode_element(&(e * client_eph));
        let es = G::encode_element(&(identity.scalar * client_eph));
        let se = G::encode_element(&(e * c_static));
        let transcript = [theirs, mine].concat();
        stream.set_read_timeout(None).ok();
        Ok(SecureStream {
            stream,
            keys: derive_keys([&ee, &es, &se], &transcript, false),
            send_ctr: 0,
            recv_ctr: 0,
            remote: client_static,
        })
    }

    pub fn remote(&self) -> PeerKey {
        self.remote
    }

    pub fn set_timeout(&self, t: Option<Duration>) {
        self.stream.set_read_timeout(t).ok();
    }

    pub fn send(&mut self, msg: &[u8]) -> Result<()> {
        let ct = self
            .keys
            .send
            .encrypt(&nonce(self.send_ctr), msg)
            .map_err(|_| Error::Internal("record too large".into()))?;
        self.send_ctr += 1;
        let mut out = Vec::with_capacity(4 + ct.len());
        out.extend_from_slice(&(ct.len() as u32).to_be_bytes());
        out.extend_from_slice(&ct);
        self.stream.write_all(&out).map_err(|_| Error::PeerUnreachable)
    }

    pub fn recv(&mut self) -> Result<Vec<u8>> {
        let mut len = [0u8; 4];
        self.stream
            .read_exact(&mut len)
            .map_err(|_| Error::PeerUnreachable)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_RECORD {
            return Err(Error::Malformed("record too large".into()));
        }
        let mut ct = vec![0u8; len];
        self.stream
            .read_exact(&mut ct)
            .map_err(|_| Error::PeerUnreachable)?;
        let pt = self
            .keys
            .recv
            .decrypt(&nonce(self.recv_ctr), ct.as_slice())
            .map_err(|_| Error::PeerUnreachable)?;
        self.recv_ctr += 1;
        Ok(pt)
    }
}

/// Accept loop serving an [`Endpoint`], one thread per connection.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl TcpServer {
    pub fn spawn(
        listener: TcpListener,
        identity: Arc<IdentityKey>,
        endpoint: Arc<dyn Endpoint>,
    ) -> Result<TcpServer> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop_flag.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let identity = Arc::clone(&identity);
                    let endpoint = Arc::clone(&endpoint);
                    let stop = Arc::clone(&stop_flag);
                    thread::spawn(move || serve_connection(conn, &identity, endpoint, &stop));
                }
            })?;
        Ok(TcpServer { addr, stop })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(
    conn: TcpStream,
    identity: &IdentityKey,
    endpoint: Arc<dyn Endpoint>,
    stop: &AtomicBool,
) {
    let Ok(mut s) = SecureStream::accept(conn, identity) else {
        return;
    };
    let caller = Caller {
        identity: s.remote(),
    };
    while !stop.load(Ordering::SeqCst) {
        let Ok(bytes) = s.recv() else { break };
        let response = match Frame::decode(&bytes) {
            Ok(frame) => endpoint.handle(&caller, frame),
            Err(e) => Frame::error(crate::wire::Flow::Session, [0; 16], &e),
        };
        if s.send(&response.encode()).is_err() {
            break;
        }
    }
    let _ = s.stream.shutdown(Shutdown::Both);
}

/// Dials TCP addresses with a fixed identity.
pub struct TcpDialer {
    identity: Arc<IdentityKey>,
    default_timeout: Option<Duration>,
}

impl TcpDialer {
    pub fn new(identity: Arc<IdentityKey>, default_timeout: Option<Duration>) -> Arc<Self> {
        Arc::new(TcpDialer {
            identity,
            default_timeout,
        })
    }
}

impl Dialer for TcpDialer {
    fn dial(
        &self,
        addr: &str,
        expect: Option<&PeerKey>,
        timeout: Option<Duration>,
    ) -> Result<Arc<dyn Link>> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|_| Error::PeerUnreachable)?
            .next()
            .ok_or(Error::PeerUnreachable)?;
        let stream = TcpStream::connect_timeout(&sock, HANDSHAKE_TIMEOUT)
            .map_err(|_| Error::PeerUnreachable)?;
        let s = SecureStream::connect(stream, &self.identity, expect)?;
        s.set_timeout(timeout.or(self.default_timeout));
        Ok(Arc::new(TcpLink {
            stream: Mutex::new(Some(s)),
        }))
    }
}

struct TcpLink {
    stream: Mutex<Option<SecureStream>>,
}

impl Link for TcpLink {
    fn call(&self, frame: &Frame) -> Result<Frame> {
        let mut guard = self.stream.lock().unwrap();
        let s = guard.as_mut().ok_or(Error::PeerUnreachable)?;
        let result = s.send(&frame.encode()).and_then(|_| s.recv());
        match result {
            Ok(bytes) => Frame::decode(&bytes),
            Err(e) => {
                // The stream is out of sync after a failure; never reuse it.
                *guard = None;
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{Flow, MsgType};

    struct Echo;

    impl Endpoint for Echo {
        fn handle(&self, caller: &Caller, frame: Frame) -> Frame {
            Frame::new(
                frame.flow,
                frame.session,
                MsgType::SrShare,
                vec![caller.identity.0.to_vec()],
            )
        }
    }

    #[test]
    fn handshake_authenticates_both_sides() {
        let server_id = Arc::new(IdentityKey::generate(&mut OsRng).unwrap());
        let client_id = Arc::new(IdentityKey::generate(&mut OsRng).unwrap());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let server = TcpServer::spawn(listener, Arc::clone(&server_id), Arc::new(Echo)).unwrap();
        let addr = server.addr().to_string();

        let dialer = TcpDialer::new(Arc::clone(&client_id), Some(Duration::from_secs(5)));
        let link = dialer.dial(&addr, Some(&server_id.public()), None).unwrap();
        for _ in 0..3 {
            let req = Frame::new(Flow::Session, [1; 16], MsgType::SrCommit, vec![vec![9; 32]]);
            let resp = link.call(&req).unwrap();
            assert_eq!(resp.field("share"), &client_id.public().0);
        }

        let wrong = IdentityKey::generate(&mut OsRng).unwrap().public();
        assert!(dialer.dial(&addr, Some(&wrong), None).is_err());
        server.shutdown();
    }

    #[test]
    fn impostor_without_secret_cannot_talk() {
        // A client claiming the server's static key but lacking its secret
        // derives different keys, so its first record fails to decrypt.
        let server_id = Arc::new(IdentityKey::generate(&mut OsRng).unwrap());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let server = TcpServer::spawn(listener, Arc::clone(&server_id), Arc::new(Echo)).unwrap();
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let claimed = IdentityKey::generate(&mut OsRng).unwrap();
        let e = random_scalar::<G, _>(&mut OsRng).unwrap();
        let mut hello = HELLO_MAGIC.to_vec();
        hello.extend_from_slice(&claimed.public().0);
        hello.extend_from_slice(&G::encode_element(&(e * G::generator())));
        stream.write_all(&hello).unwrap();
        let (theirs, s_static, s_eph) = SecureStream::read_hello(&mut stream).unwrap();
        let forged = IdentityKey::generate(&mut OsRng).unwrap();
        let ee = G::encode_element(&(e * s_eph));
        let es = G::encode_element(&(e * point(&s_static.0).unwrap()));
        let se = G::encode_element(&(forged.scalar * s_eph));
        let mut s = SecureStream {
            stream,
            keys: derive_keys([&ee, &es, &se], &[hello, theirs].concat(), true),
            send_ctr: 0,
            recv_ctr: 0,
            remote: s_static,
        };
        let req = Frame::new(Flow::Session, [1; 16], MsgType::SrCommit, vec![vec![9; 32]]);
        s.send(&req.encode()).unwrap();
        assert!(s.recv().is_err());
    }

    #[test]
    fn pairing_code_is_six_digits_and_order_sensitive() {
        let a = IdentityKey::generate(&mut OsRng).unwrap().public();
        let b = IdentityKey::generate(&mut OsRng).unwrap().public();
        let code = pairing_code(&a, &b);
        assert_eq!(code.len(), 6);
        assert!(code.chars().all(|c| c.is_ascii_digit()));
        assert_eq!(code, pairing_code(&a, &b));
    }
}
