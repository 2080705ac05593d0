//! Prime-order group abstraction.
//!
//! Every protocol in this crate is written against [`PrimeGroup`]. Two
//! instantiations ship with the crate:
//!
//! * [`Ristretto255`], the production profile: a prime-order group built on
//!   Curve25519 with a constant-time (Elligator) map to the group.
//! * [`Zmod`], a toy profile over the additive group of integers modulo a
//!   small prime with generator `1`, so that `s·G = s mod P`. Its values can be
//!   checked by hand and it is small enough to enumerate exhaustively.

use core::fmt::Debug;
use core::ops::{Add, Mul, Neg, Sub};

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::traits::Identity;
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use zeroize::Zeroize;

use crate::error::{Error, Result};

/// Domain tag for hashing onto the group.
pub const DST_HASH_TO_GROUP: &[u8] = b"2FE-H1";
/// Domain tag for the Fiat-Shamir challenge of the DLEQ proof.
pub const DST_NIZK: &[u8] = b"2FE-NIZK";
/// Domain tag for commitments.
pub const DST_COMMIT: &[u8] = b"2FE-COMMIT";
/// Domain tag for file-key derivation.
pub const DST_KDF: &[u8] = b"2FE-KDF";

/// A cyclic group of prime order together with its scalar field.
pub trait PrimeGroup: Copy + Debug + Send + Sync + 'static {
    type Scalar: Copy
        + Debug
        + Eq
        + Send
        + Sync
        + Zeroize
        + Add<Output = Self::Scalar>
        + Sub<Output = Self::Scalar>
        + Neg<Output = Self::Scalar>
        + Mul<Output = Self::Scalar>
        + Mul<Self::Element, Output = Self::Element>;

    type Element: Copy
        + Debug
        + Eq
        + Send
        + Sync
        + Add<Output = Self::Element>
        + Sub<Output = Self::Element>
        + Neg<Output = Self::Element>;

    /// Name of the group, as recorded in [`GroupConfig`].
    const ID: &'static str;
    /// Length of a canonical scalar encoding.
    const SCALAR_LEN: usize;
    /// Length of a canonical element encoding.
    const ELEMENT_LEN: usize;
    /// Seed length λ in bits.
    const SECURITY_BITS: u32;
    /// Output length κ of the commitment and key-derivation hash, in bits.
    const HASH_BITS: u32;

    fn generator() -> Self::Element;
    fn identity() -> Self::Element;
    fn scalar_from_u64(v: u64) -> Self::Scalar;
    /// Reduces 512 uniform bits modulo the group order.
    fn scalar_from_wide(bytes: &[u8; 64]) -> Self::Scalar;
    /// Interprets a 256-bit digest as an integer and reduces it modulo the
    /// group order. Used for proof challenges, which are compared as digests.
    fn scalar_from_digest(digest: &[u8; 32]) -> Self::Scalar;
    /// Group order, big-endian, minimal length.
    fn order_be() -> Vec<u8>;
    /// Fixed-length big-endian encoding.
    fn encode_scalar(s: &Self::Scalar) -> Vec<u8>;
    /// Rejects wrong lengths and values `>= order`.
    fn decode_scalar(bytes: &[u8]) -> Result<Self::Scalar>;
    fn encode_element(e: &Self::Element) -> Vec<u8>;
    /// Rejects anything that is not the encoding of a group element.
    fn decode_element(bytes: &[u8]) -> Result<Self::Element>;
    /// Maps 512 uniform bits to a group element. Must run in constant time.
    fn map_to_element(uniform: &[u8; 64]) -> Self::Element;
}

/// Public parameters of a group profile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupConfig {
    pub group_id: &'static str,
    pub generator: Vec<u8>,
    pub order: Vec<u8>,
    pub security_bits: u32,
    pub hash_bits: u32,
}

pub fn config<G: PrimeGroup>() -> GroupConfig {
    GroupConfig {
        group_id: G::ID,
        generator: G::encode_element(&G::generator()),
        order: G::order_be(),
        security_bits: G::SECURITY_BITS,
        hash_bits: G::HASH_BITS,
    }
}

/// Fills `buf` from `rng`, surfacing generator failure as [`Error::Entropy`].
pub fn fill_random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, buf: &mut [u8]) -> Result<()> {
    rng.try_fill_bytes(buf).map_err(|_| Error::Entropy)
}

/// Uniform scalar in `[0, p-1]`.
pub fn random_scalar<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    rng: &mut R,
) -> Result<G::Scalar> {
    let mut wide = [0u8; 64];
    fill_random(rng, &mut wide)?;
    let s = G::scalar_from_wide(&wide);
    wide.zeroize();
    Ok(s)
}

/// Injective framing: every part is prefixed by its 32-bit big-endian length.
pub fn frame_parts<'a, I>(domain: &[u8], parts: I) -> Vec<u8>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut out = Vec::new();
    push_prefixed(&mut out, domain);
    for part in parts {
        push_prefixed(&mut out, part);
    }
    out
}

fn push_prefixed(out: &mut Vec<u8>, part: &[u8]) {
    let len = u32::try_from(part.len()).expect("hash input part exceeds 4 GiB");
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(part);
}

/// Deterministic hash onto the group, never returning the identity.
pub fn hash_to_group<G: PrimeGroup>(input: &[u8]) -> G::Element {
    let mut counter: u32 = 0;
    loop {
        let ctr = counter.to_be_bytes();
        let parts: [&[u8]; 2] = [input, &ctr];
        let digest = Sha512::digest(frame_parts(DST_HASH_TO_GROUP, parts));
        let wide: [u8; 64] = digest.into();
        let e = G::map_to_element(&wide);
        if e != G::identity() {
            return e;
        }
        // Only reachable in groups small enough that the map hits the identity.
        counter += 1;
    }
}

/// Hashes a framed list of byte strings to a scalar.
pub fn hash_to_scalar<G: PrimeGroup>(domain: &[u8], parts: &[&[u8]]) -> G::Scalar {
    let digest = Sha512::digest(frame_parts(domain, parts.iter().copied()));
    let wide: [u8; 64] = digest.into();
    G::scalar_from_wide(&wide)
}

/// SHA-256 over framed parts. Used by the commitment and the KDF.
pub fn hash_256(domain: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    Sha256::digest(frame_parts(domain, parts.iter().copied())).into()
}

// ---------------------------------------------------------------------------
// Production profile

/// Ristretto255: prime order `2^252 + 27742317777372353535851937790883648493`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ristretto255;

const RISTRETTO_ORDER_LE: [u8; 32] = [
    0xed, 0xd3, 0xf5, 0x5c, 0x1a, 0x63, 0x12, 0x58, 0xd6, 0x9c, 0xf7, 0xa2, 0xde, 0xf9, 0xde, 0x14,
    0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x10,
];

impl PrimeGroup for Ristretto255 {
    type Scalar = curve25519_dalek::Scalar;
    type Element = RistrettoPoint;

    const ID: &'static str = "ristretto255";
    const SCALAR_LEN: usize = 32;
    const ELEMENT_LEN: usize = 32;
    const SECURITY_BITS: u32 = 256;
    const HASH_BITS: u32 = 256;

    fn generator() -> RistrettoPoint {
        curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT
    }

    fn identity() -> RistrettoPoint {
        RistrettoPoint::identity()
    }

    fn scalar_from_u64(v: u64) -> Self::Scalar {
        curve25519_dalek::Scalar::from(v)
    }

    fn scalar_from_wide(bytes: &[u8; 64]) -> Self::Scalar {
        curve25519_dalek::Scalar::from_bytes_mod_order_wide(bytes)
    }

    fn scalar_from_digest(digest: &[u8; 32]) -> Self::Scalar {
        curve25519_dalek::Scalar::from_bytes_mod_order(*digest)
    }

    fn order_be() -> Vec<u8> {
        let mut be = RISTRETTO_ORDER_LE;
        be.reverse();
        be.to_vec()
    }

    fn encode_scalar(s: &Self::Scalar) -> Vec<u8> {
        let mut bytes = s.to_bytes();
        bytes.reverse();
        bytes.to_vec()
    }

    fn decode_scalar(bytes: &[u8]) -> Result<Self::Scalar> {
        let mut le: [u8; 32] = bytes.try_into().map_err(|_| Error::BadLength {
            expected: 32,
            actual: bytes.len(),
        })?;
        le.reverse();
        Option::from(curve25519_dalek::Scalar::from_canonical_bytes(le))
            .ok_or(Error::InvalidEncoding { what: "scalar" })
    }

    fn encode_element(e: &RistrettoPoint) -> Vec<u8> {
        e.compress().to_bytes().to_vec()
    }

    fn decode_element(bytes: &[u8]) -> Result<RistrettoPoint> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| Error::BadLength {
            expected: 32,
            actual: bytes.len(),
        })?;
        CompressedRistretto(arr)
            .decompress()
            .ok_or(Error::InvalidEncoding { what: "group element" })
    }

    fn map_to_element(uniform: &[u8; 64]) -> RistrettoPoint {
        RistrettoPoint::from_uniform_bytes(uniform)
    }
}

// ---------------------------------------------------------------------------
// Toy profile

/// Additive group of integers modulo the prime `P`, generator `1`.
///
/// Discrete logarithms are trivial here; the profile exists so protocol
/// transcripts can be verified with pencil-and-paper modular arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Zmod<const P: u32>;

/// The toy profile used throughout the tests.
pub type Toy101 = Zmod<101>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ZmodScalar<const P: u32>(u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ZmodElement<const P: u32>(u32);

impl<const P: u32> ZmodScalar<P> {
    pub fn new(v: u64) -> Self {
        Self((v % u64::from(P)) as u32)
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl<const P: u32> ZmodElement<P> {
    pub fn new(v: u64) -> Self {
        Self((v % u64::from(P)) as u32)
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl<const P: u32> Zeroize for ZmodScalar<P> {
    fn zeroize(&mut self) {
        self.0.zeroize();
    }
}

fn add_mod<const P: u32>(a: u32, b: u32) -> u32 {
    ((u64::from(a) + u64::from(b)) % u64::from(P)) as u32
}

fn mul_mod<const P: u32>(a: u32, b: u32) -> u32 {
    ((u64::from(a) * u64::from(b)) % u64::from(P)) as u32
}

fn neg_mod<const P: u32>(a: u32) -> u32 {
    if a == 0 {
        0
    } else {
        P - a
    }
}

macro_rules! zmod_additive {
    ($ty:ident) => {
        impl<const P: u32> Add for $ty<P> {
            type Output = Self;
            fn add(self, rhs: Self) -> Self {
                Self(add_mod::<P>(self.0, rhs.0))
            }
        }
        impl<const P: u32> Sub for $ty<P> {
            type Output = Self;
            fn sub(self, rhs: Self) -> Self {
                Self(add_mod::<P>(self.0, neg_mod::<P>(rhs.0)))
            }
        }
        impl<const P: u32> Neg for $ty<P> {
            type Output = Self;
            fn neg(self) -> Self {
                Self(neg_mod::<P>(self.0))
            }
        }
    };
}

zmod_additive!(ZmodScalar);
zmod_additive!(ZmodElement);

impl<const P: u32> Mul for ZmodScalar<P> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self(mul_mod::<P>(self.0, rhs.0))
    }
}

impl<const P: u32> Mul<ZmodElement<P>> for ZmodScalar<P> {
    type Output = ZmodElement<P>;
    fn mul(self, rhs: ZmodElement<P>) -> ZmodElement<P> {
        ZmodElement(mul_mod::<P>(self.0, rhs.0))
    }
}

const fn byte_len(mut v: u32) -> usize {
    let mut n = 0;
    while v > 0 {
        v >>= 8;
        n += 1;
    }
    if n == 0 {
        1
    } else {
        n
    }
}

fn encode_fixed(v: u32, len: usize) -> Vec<u8> {
    v.to_be_bytes()[4 - len..].to_vec()
}

fn decode_fixed<const P: u32>(bytes: &[u8], len: usize, what: &'static str) -> Result<u32> {
    if bytes.len() != len {
        return Err(Error::BadLength {
            expected: len,
            actual: bytes.len(),
        });
    }
    let v = bytes.iter().fold(0u32, |acc, b| (acc << 8) | u32::from(*b));
    if v >= P {
        return Err(Error::InvalidEncoding { what });
    }
    Ok(v)
}

impl<const P: u32> PrimeGroup for Zmod<P> {
    type Scalar = ZmodScalar<P>;
    type Element = ZmodElement<P>;

    const ID: &'static str = "zmod";
    const SCALAR_LEN: usize = byte_len(P - 1);
    const ELEMENT_LEN: usize = byte_len(P - 1);
    const SECURITY_BITS: u32 = 256;
    const HASH_BITS: u32 = 256;

    fn generator() -> ZmodElement<P> {
        ZmodElement(1)
    }

    fn identity() -> ZmodElement<P> {
        ZmodElement(0)
    }

    fn scalar_from_u64(v: u64) -> ZmodScalar<P> {
        ZmodScalar::new(v)
    }

    fn scalar_from_wide(bytes: &[u8; 64]) -> ZmodScalar<P> {
        ZmodScalar(reduce_mod(bytes, P))
    }

    fn scalar_from_digest(digest: &[u8; 32]) -> ZmodScalar<P> {
        ZmodScalar(reduce_mod(digest, P))
    }

    fn order_be() -> Vec<u8> {
        encode_fixed(P, byte_len(P))
    }

    fn encode_scalar(s: &ZmodScalar<P>) -> Vec<u8> {
        encode_fixed(s.0, Self::SCALAR_LEN)
    }

    fn decode_scalar(bytes: &[u8]) -> Result<ZmodScalar<P>> {
        decode_fixed::<P>(bytes, Self::SCALAR_LEN, "scalar").map(ZmodScalar)
    }

    fn encode_element(e: &ZmodElement<P>) -> Vec<u8> {
        encode_fixed(e.0, Self::ELEMENT_LEN)
    }

    fn decode_element(bytes: &[u8]) -> Result<ZmodElement<P>> {
        decode_fixed::<P>(bytes, Self::ELEMENT_LEN, "group element").map(ZmodElement)
    }

    fn map_to_element(uniform: &[u8; 64]) -> ZmodElement<P> {
        // Lands in 1..P so the toy map never yields the identity either.
        ZmodElement(1 + reduce_mod(uniform, P - 1))
    }
}

fn reduce_mod(bytes: &[u8], m: u32) -> u32 {
    bytes
        .iter()
        .fold(0u64, |acc, b| (acc * 256 + u64::from(*b)) % u64::from(m)) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type R = Ristretto255;

    #[test]
    fn ristretto_scalar_encoding_is_big_endian() {
        let one = R::scalar_from_u64(1);
        let enc = R::encode_scalar(&one);
        assert_eq!(enc.len(), 32);
        assert_eq!(enc[31], 1);
        assert!(enc[..31].iter().all(|b| *b == 0));
    }

    #[test]
    fn ristretto_rejects_non_canonical_scalar() {
        assert_eq!(
            R::decode_scalar(&R::order_be()),
            Err(Error::InvalidEncoding { what: "scalar" })
        );
        let minus_one = -R::scalar_from_u64(1);
        let enc = R::encode_scalar(&minus_one);
        let mut order = R::order_be();
        *order.last_mut().unwrap() -= 1;
        assert_eq!(enc, order);
        assert_eq!(R::decode_scalar(&enc).unwrap(), minus_one);
    }

    #[test]
    fn ristretto_rejects_bad_points() {
        // 0xff.. is not a canonical field element, so it never decodes.
        assert!(R::decode_element(&[0xff; 32]).is_err());
        assert!(R::decode_element(&[0u8; 31]).is_err());
        let id = R::decode_element(&[0u8; 32]).unwrap();
        assert_eq!(id, R::identity());
    }

    #[test]
    fn scalar_arithmetic_cancels() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_scalar::<R, _>(&mut rng).unwrap();
            let b = random_scalar::<R, _>(&mut rng).unwrap();
            assert_eq!((a + b) + (-b), a);
            assert_eq!(R::decode_scalar(&R::encode_scalar(&a)).unwrap(), a);
        }
    }

    #[test]
    fn thousand_draws_are_distinct() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let s = random_scalar::<R, _>(&mut rng).unwrap();
            assert!(seen.insert(R::encode_scalar(&s)));
        }
    }

    #[test]
    fn hash_to_group_is_deterministic_and_separated() {
        let a = hash_to_group::<R>(b"a");
        assert_eq!(a, hash_to_group::<R>(b"a"));
        assert_ne!(a, hash_to_group::<R>(b"b"));
        assert_ne!(a, R::identity());
        // Same input under a different tag lands elsewhere.
        let other = R::map_to_element(&Sha512::digest(frame_parts(DST_NIZK, [&b"a"[..]])).into());
        assert_ne!(a, other);
    }

    #[test]
    fn framing_is_injective_on_splits() {
        let joined = hash_to_scalar::<R>(b"t", &[b"ab"]);
        let split = hash_to_scalar::<R>(b"t", &[b"a", b"b"]);
        let swapped = hash_to_scalar::<R>(b"t", &[b"b", b"a"]);
        assert_ne!(joined, split);
        assert_ne!(split, swapped);
        assert_ne!(
            hash_to_scalar::<R>(b"t1", &[b"x"]),
            hash_to_scalar::<R>(b"t2", &[b"x"])
        );
    }

    #[test]
    fn toy_arithmetic_matches_integers() {
        type T = Toy101;
        let a = T::scalar_from_u64(7);
        let g13 = ZmodElement::<101>::new(13);
        assert_eq!((a * g13).value(), 91);
        assert_eq!((-a).value(), 94);
        assert_eq!((a * T::generator()).value(), 7);
        assert_eq!(T::SCALAR_LEN, 1);
        assert_eq!(T::order_be(), vec![101]);
        assert!(T::decode_scalar(&[101]).is_err());
        assert_eq!(T::decode_scalar(&[100]).unwrap().value(), 100);
        assert_eq!(Zmod::<23>::SCALAR_LEN, 1);
        assert_eq!(Zmod::<65537>::SCALAR_LEN, 3);
    }

    #[test]
    fn toy_hash_to_group_avoids_identity() {
        for i in 0u32..2000 {
            let e = hash_to_group::<Toy101>(&i.to_be_bytes());
            assert_ne!(e.value(), 0);
            assert!(e.value() < 101);
        }
    }

    #[test]
    fn config_reports_profile() {
        let cfg = config::<R>();
        assert_eq!(cfg.group_id, "ristretto255");
        assert_eq!(cfg.security_bits, 256);
        assert_eq!(cfg.hash_bits, 256);
        assert_eq!(cfg.order.len(), 32);
        assert_eq!(config::<Toy101>().generator, vec![1]);
    }
}
