//! Non-interactive proof that two group elements share a discrete logarithm.
//!
//! Proves `log_A(B) = log_G(P)` for a secret `x` with `P = x·G`, `B = x·A`.
//! The prover draws a nonce `t`, hashes `(G, P, A, B, t·G, t·A)` to a 256-bit
//! challenge `w` and answers `ρ = t + w·x`, where `w` is reduced modulo the
//! group order for the arithmetic. The verifier rebuilds the nonce
//! commitments as `ρ·G − w·P` and `ρ·A − w·B`, rehashes, and compares the full
//! digest. Comparing digests rather than reduced scalars keeps the forgery
//! bound at `2^-256` even in the toy profile, whose scalars have 7 bits.

use core::fmt;

use rand_core::{CryptoRng, RngCore};
use subtle::ConstantTimeEq;
use zeroize::Zeroize;

use crate::error::{Error, Result};
use crate::group::{hash_256, random_scalar, PrimeGroup, DST_NIZK};

/// Challenge digest length.
pub const CHALLENGE_LEN: usize = 32;

/// Proof `(w, ρ)`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DleqProof<G: PrimeGroup> {
    pub challenge: [u8; CHALLENGE_LEN],
    pub response: G::Scalar,
}

impl<G: PrimeGroup> fmt::Debug for DleqProof<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DleqProof")
            .field("challenge", &self.challenge_scalar())
            .field("response", &self.response)
            .finish()
    }
}

impl<G: PrimeGroup> DleqProof<G> {
    pub const ENCODED_LEN: usize = G::SCALAR_LEN + CHALLENGE_LEN;

    /// The challenge as used in the response equation.
    pub fn challenge_scalar(&self) -> G::Scalar {
        G::scalar_from_digest(&self.challenge)
    }

    /// `ρ ‖ w`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = G::encode_scalar(&self.response);
        out.extend_from_slice(&self.challenge);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(Error::BadLength {
                expected: Self::ENCODED_LEN,
                actual: bytes.len(),
            });
        }
        let (rho, w) = bytes.split_at(G::SCALAR_LEN);
        Ok(DleqProof {
            response: G::decode_scalar(rho)?,
            challenge: w.try_into().expect("length checked above"),
        })
    }
}

/// Fiat-Shamir challenge over `(G, P, A, B, R1, R2)` in exactly that order,
/// each element length-prefixed.
pub fn challenge<G: PrimeGroup>(
    g: &G::Element,
    p: &G::Element,
    a: &G::Element,
    b: &G::Element,
    r1: &G::Element,
    r2: &G::Element,
) -> [u8; CHALLENGE_LEN] {
    let encoded: Vec<Vec<u8>> = [g, p, a, b, r1, r2]
        .into_iter()
        .map(G::encode_element)
        .collect();
    let parts: Vec<&[u8]> = encoded.iter().map(Vec::as_slice).collect();
    hash_256(DST_NIZK, &parts)
}

/// The prover's answer `t + w·x`.
pub fn respond<G: PrimeGroup>(nonce: G::Scalar, challenge: G::Scalar, x: G::Scalar) -> G::Scalar {
    nonce + challenge * x
}

/// Proves `B = x·A` against `P = x·G` with a fresh nonce.
pub fn prove<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    g: &G::Element,
    x: G::Scalar,
    a: &G::Element,
    b: &G::Element,
    rng: &mut R,
) -> Result<DleqProof<G>> {
    let mut nonce = random_scalar::<G, R>(rng)?;
    let proof = prove_with_nonce::<G>(g, x, a, b, nonce);
    nonce.zeroize();
    Ok(proof)
}

/// Deterministic variant for known-answer tests. Never reuse a nonce.
pub fn prove_with_nonce<G: PrimeGroup>(
    g: &G::Element,
    x: G::Scalar,
    a: &G::Element,
    b: &G::Element,
    nonce: G::Scalar,
) -> DleqProof<G> {
    let p = x * *g;
    let w = challenge::<G>(g, &p, a, b, &(nonce * *g), &(nonce * *a));
    DleqProof {
        challenge: w,
        response: respond::<G>(nonce, G::scalar_from_digest(&w), x),
    }
}

/// Nonce commitments `(ρ·G − w·P, ρ·A − w·B)` as rebuilt by the verifier.
pub fn recompute_commitments<G: PrimeGroup>(
    g: &G::Element,
    a: &G::Element,
    b: &G::Element,
    proof: &DleqProof<G>,
    p: &G::Element,
) -> (G::Element, G::Element) {
    let w = proof.challenge_scalar();
    (
        proof.response * *g - w * *p,
        proof.response * *a - w * *b,
    )
}

/// Accepts iff the recomputed challenge equals `proof.challenge`.
pub fn verify<G: PrimeGroup>(
    g: &G::Element,
    a: &G::Element,
    b: &G::Element,
    proof: &DleqProof<G>,
    p: &G::Element,
) -> bool {
    let (r1, r2) = recompute_commitments::<G>(g, a, b, proof, p);
    challenge::<G>(g, p, a, b, &r1, &r2)
        .ct_eq(&proof.challenge)
        .into()
}

/// Verifies wire-encoded `B` and proof. Malformed encodings are an error,
/// distinct from a well-formed proof that fails to verify.
pub fn verify_encoded<G: PrimeGroup>(
    g: &G::Element,
    a: &G::Element,
    b: &[u8],
    proof: &[u8],
    p: &G::Element,
) -> Result<bool> {
    let b = G::decode_element(b)?;
    let proof = DleqProof::<G>::from_bytes(proof)?;
    Ok(verify::<G>(g, a, &b, &proof, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{hash_to_group, Ristretto255, Toy101, ZmodElement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type T = Toy101;
    type R = Ristretto255;

    fn ts(v: u64) -> <T as PrimeGroup>::Scalar {
        T::scalar_from_u64(v)
    }

    fn te(v: u64) -> ZmodElement<101> {
        ZmodElement::new(v)
    }

    fn digest_of(v: u8) -> [u8; 32] {
        let mut d = [0u8; 32];
        d[31] = v;
        d
    }

    #[test]
    fn toy_worked_transcript() {
        // x = 7, A = 13, B = 91, nonce 5 and a stubbed challenge 3.
        let (g, a, b, p) = (te(1), te(13), te(91), te(7));
        assert_eq!(ts(7) * a, b);
        let rho = respond::<T>(ts(5), ts(3), ts(7));
        assert_eq!(rho, ts(26));
        let proof = DleqProof::<T> {
            challenge: digest_of(3),
            response: rho,
        };
        assert_eq!(proof.challenge_scalar(), ts(3));
        let (r1, r2) = recompute_commitments::<T>(&g, &a, &b, &proof, &p);
        assert_eq!(r1, te(5));
        assert_eq!(r2, te(65));
        assert_eq!(r2, ts(5) * a);
    }

    #[test]
    fn toy_proof_with_hashed_challenge_verifies() {
        let (g, a) = (te(1), te(13));
        let b = ts(7) * a;
        let proof = prove_with_nonce::<T>(&g, ts(7), &a, &b, ts(5));
        assert!(verify::<T>(&g, &a, &b, &proof, &te(7)));
        assert!(!verify::<T>(&g, &a, &(b + g), &proof, &te(7)));
    }

    #[test]
    fn zero_witness_verifies_against_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let g = R::generator();
        let a = hash_to_group::<R>(b"anything");
        let zero = R::scalar_from_u64(0);
        let proof = prove::<R, _>(&g, zero, &a, &R::identity(), &mut rng).unwrap();
        assert!(verify::<R>(&g, &a, &R::identity(), &proof, &R::identity()));
    }

    #[test]
    fn honest_proofs_verify_and_tampering_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let g = R::generator();
        for i in 0u32..50 {
            let x = random_scalar::<R, _>(&mut rng).unwrap();
            let a = hash_to_group::<R>(&i.to_be_bytes());
            let b = x * a;
            let p = x * g;
            let proof = prove::<R, _>(&g, x, &a, &b, &mut rng).unwrap();
            assert!(verify::<R>(&g, &a, &b, &proof, &p));
            assert!(!verify::<R>(&g, &a, &(b + g), &proof, &p));
            assert!(!verify::<R>(&g, &a, &b, &proof, &(p + g)));
        }
    }

    #[test]
    fn nonces_are_fresh() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let g = R::generator();
        let x = random_scalar::<R, _>(&mut rng).unwrap();
        let a = hash_to_group::<R>(b"same statement");
        let b = x * a;
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let proof = prove::<R, _>(&g, x, &a, &b, &mut rng).unwrap();
            assert!(seen.insert(R::encode_scalar(&proof.response)));
        }
    }

    #[test]
    fn encoding_round_trips_and_rejects_garbage() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let g = R::generator();
        let x = random_scalar::<R, _>(&mut rng).unwrap();
        let a = hash_to_group::<R>(b"enc");
        let b = x * a;
        let proof = prove::<R, _>(&g, x, &a, &b, &mut rng).unwrap();
        let bytes = proof.to_bytes();
        assert_eq!(bytes.len(), 64);
        assert_eq!(DleqProof::<R>::from_bytes(&bytes).unwrap(), proof);
        assert_eq!(
            verify_encoded::<R>(&g, &a, &R::encode_element(&b), &bytes, &(x * g)),
            Ok(true)
        );
        assert!(verify_encoded::<R>(&g, &a, &[0xff; 32], &bytes, &(x * g)).is_err());
        assert!(
            verify_encoded::<R>(&g, &a, &R::encode_element(&b), &bytes[..63], &(x * g)).is_err()
        );
        let mut high = bytes.clone();
        high[0] = 0xff;
        assert!(DleqProof::<R>::from_bytes(&high).is_err());
        assert_eq!(DleqProof::<T>::ENCODED_LEN, 33);
    }
}
