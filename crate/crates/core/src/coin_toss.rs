//! Two-party commit-reveal coin toss producing a shared seed.
//!
//! 1. The initiator (primary) draws `s0` and sends `c = H(s0)`.
//! 2. The responder (secondary), having stored `c`, draws and sends `s1`.
//! 3. The initiator reveals `s0` and outputs `s0 ⊕ s1`.
//! 4. The responder checks `c = H(s0)` and outputs `s1 ⊕ s0`.
//!
//! The commitment carries no extra randomness; it relies on the committed
//! preimage being a full 256-bit random string. Seeds shorter than that (the
//! toy profile) are padded with fresh random bytes before committing.

use core::fmt;
use std::time::Duration;

use rand_core::{CryptoRng, RngCore};
use subtle::ConstantTimeEq;
use zeroize::{Zeroize, Zeroizing};

use crate::error::{Error, Result};
use crate::group::{fill_random, hash_256, DST_COMMIT};

/// Length of a commitment preimage: λ = 256 bits.
pub const PREIMAGE_LEN: usize = 32;
/// Production seed length.
pub const SEED_LEN: usize = 32;
/// Either side aborts if the next expected message is this late.
pub const SR_TIMEOUT: Duration = Duration::from_secs(30);

/// `H(preimage)` under the commitment domain tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Commitment(pub [u8; 32]);

impl fmt::Debug for Commitment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Commitment(")?;
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl Commitment {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| Error::BadLength {
            expected: 32,
            actual: bytes.len(),
        })?;
        Ok(Commitment(arr))
    }
}

/// Commits to a λ-bit preimage.
pub fn commit(preimage: &[u8]) -> Result<Commitment> {
    if preimage.len() != PREIMAGE_LEN {
        return Err(Error::BadLength {
            expected: PREIMAGE_LEN,
            actual: preimage.len(),
        });
    }
    Ok(Commitment(hash_256(DST_COMMIT, &[preimage])))
}

/// Constant-time check that `c` opens to `preimage`.
pub fn verify_commitment(c: &Commitment, preimage: &[u8]) -> bool {
    match commit(preimage) {
        Ok(expected) => bool::from(expected.0.ct_eq(&c.0)),
        Err(_) => false,
    }
}

/// `s0 ⊕ s1`.
pub fn finalize(s0: &[u8], s1: &[u8]) -> Result<Zeroizing<Vec<u8>>> {
    if s0.len() != s1.len() {
        return Err(Error::LengthMismatch {
            left: s0.len(),
            right: s1.len(),
        });
    }
    Ok(Zeroizing::new(
        s0.iter().zip(s1).map(|(a, b)| a ^ b).collect(),
    ))
}

/// Progress of one coin-toss session. Transitions only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedState {
    Init,
    Committed,
    Revealed,
    Done,
    Aborted,
}

/// Primary side.
pub struct SeedInitiator {
    state: SeedState,
    seed_len: usize,
    preimage: Zeroizing<[u8; PREIMAGE_LEN]>,
}

impl fmt::Debug for SeedInitiator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeedInitiator")
            .field("state", &self.state)
            .field("seed_len", &self.seed_len)
            .finish_non_exhaustive()
    }
}

impl SeedInitiator {
    pub fn new(seed_len: usize) -> Self {
        assert!(
            (1..=PREIMAGE_LEN).contains(&seed_len),
            "seed length must be 1..=32 bytes"
        );
        SeedInitiator {
            state: SeedState::Init,
            seed_len,
            preimage: Zeroizing::new([0u8; PREIMAGE_LEN]),
        }
    }

    pub fn state(&self) -> SeedState {
        self.state
    }

    /// Draws `s0` (plus padding) and returns the commitment to send.
    pub fn commit<R: RngCore + CryptoRng + ?Sized>(&mut self, rng: &mut R) -> Result<Commitment> {
        if self.state != SeedState::Init {
            return Err(self.order_error("commit after start"));
        }
        if let Err(e) = fill_random(rng, &mut self.preimage[..]) {
            self.abort();
            return Err(e);
        }
        self.state = SeedState::Committed;
        commit(&self.preimage[..])
    }

    /// Consumes the responder's `s1`, returning the opening to send and the seed.
    pub fn receive_share(&mut self, s1: &[u8]) -> Result<(Zeroizing<Vec<u8>>, Zeroizing<Vec<u8>>)> {
        if self.state != SeedState::Committed {
            return Err(self.order_error("share before commitment"));
        }
        if s1.len() != self.seed_len {
            self.abort();
            return Err(Error::LengthMismatch {
                left: self.seed_len,
                right: s1.len(),
            });
        }
        let seed = finalize(&self.preimage[..self.seed_len], s1)?;
        let opening = Zeroizing::new(self.preimage.to_vec());
        self.state = SeedState::Revealed;
        Ok((opening, seed))
    }

    /// Marks the session finished and wipes `s0`.
    pub fn complete(&mut self) {
        if self.state == SeedState::Revealed {
            self.state = SeedState::Done;
        }
        self.preimage.zeroize();
    }

    pub fn abort(&mut self) {
        self.state = SeedState::Aborted;
        self.preimage.zeroize();
    }

    fn order_error(&self, what: &'static str) -> Error {
        if self.state == SeedState::Aborted {
            Error::Aborted
        } else {
            Error::ProtocolOrder(what)
        }
    }
}

/// Secondary side.
pub struct SeedResponder {
    state: SeedState,
    seed_len: usize,
    commitment: Option<Commitment>,
    share: Zeroizing<Vec<u8>>,
}

impl fmt::Debug for SeedResponder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeedResponder")
            .field("state", &self.state)
            .field("commitment", &self.commitment)
            .finish_non_exhaustive()
    }
}

impl SeedResponder {
    pub fn new(seed_len: usize) -> Self {
        assert!(
            (1..=PREIMAGE_LEN).contains(&seed_len),
            "seed length must be 1..=32 bytes"
        );
        SeedResponder {
            state: SeedState::Init,
            seed_len,
            commitment: None,
            share: Zeroizing::new(Vec::new()),
        }
    }

    pub fn state(&self) -> SeedState {
        self.state
    }

    pub fn receive_commitment(&mut self, c: Commitment) -> Result<()> {
        if self.state != SeedState::Init {
            return Err(self.order_error("second commitment"));
        }
        self.commitment = Some(c);
        self.state = SeedState::Committed;
        Ok(())
    }

    /// Draws `s1`. Only legal once the commitment has been stored.
    pub fn respond<R: RngCore + CryptoRng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<u8>> {
        let mut s1 = vec![0u8; self.seed_len];
        fill_random(rng, &mut s1)?;
        self.respond_with(s1)
    }

    /// Like [`respond`](Self::respond) with a caller-chosen `s1`, which lets
    /// tests model a responder that picks its share adversarially.
    pub fn respond_with(&mut self, s1: Vec<u8>) -> Result<Vec<u8>> {
        if self.state != SeedState::Committed {
            return Err(self.order_error("share before commitment"));
        }
        if s1.len() != self.seed_len {
            return Err(Error::LengthMismatch {
                left: self.seed_len,
                right: s1.len(),
            });
        }
        self.share = Zeroizing::new(s1.clone());
        self.state = SeedState::Revealed;
        Ok(s1)
    }

    /// Checks the opening and outputs the seed. A bad opening aborts.
    pub fn receive_opening(&mut self, preimage: &[u8]) -> Result<Zeroizing<Vec<u8>>> {
        if self.state != SeedState::Revealed {
            return Err(self.order_error("opening before share"));
        }
        let c = self.commitment.expect("commitment stored in Committed state");
        if !verify_commitment(&c, preimage) {
            self.abort();
            return Err(Error::CommitmentMismatch);
        }
        let seed = finalize(&preimage[..self.seed_len], &self.share)?;
        self.state = SeedState::Done;
        self.share.zeroize();
        Ok(seed)
    }

    pub fn abort(&mut self) {
        self.state = SeedState::Aborted;
        self.share.zeroize();
    }

    fn order_error(&self, what: &'static str) -> Error {
        if self.state == SeedState::Aborted {
            Error::Aborted
        } else {
            Error::ProtocolOrder(what)
        }
    }
}
