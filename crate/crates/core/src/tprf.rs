//! Two-party evaluation of `k = H(x, (k_C + k_D)·H'(x))`.
//!
//! The secondary returns `B = k_D·H'(x)` with a DLEQ proof against its public
//! key `pk = k_D·G`. The primary checks the proof, then outputs
//! `H(x, B + k_C·H'(x))`. A secondary that evaluates with any share other
//! than the enrolled one is caught by the proof, and the primary emits no key.

use core::fmt;

use rand_core::{CryptoRng, RngCore};
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

use crate::dleq::{self, DleqProof};
use crate::error::{Error, Result};
use crate::group::{hash_256, hash_to_group, PrimeGroup, DST_KDF};

/// Leading tag of every PRF input.
pub const PRF_INPUT_TAG: &[u8] = b"2FE-KDF-INPUT";

/// `"2FE-KDF-INPUT" ‖ len(t) ‖ t ‖ len(s) ‖ s` with 32-bit big-endian lengths.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PrfInput(Vec<u8>);

impl PrfInput {
    pub fn new(tag: &[u8], seed: &[u8]) -> Self {
        let mut x = Vec::with_capacity(PRF_INPUT_TAG.len() + tag.len() + seed.len() + 8);
        x.extend_from_slice(PRF_INPUT_TAG);
        for part in [tag, seed] {
            let len = u32::try_from(part.len()).expect("PRF input part exceeds 4 GiB");
            x.extend_from_slice(&len.to_be_bytes());
            x.extend_from_slice(part);
        }
        PrfInput(x)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// `H'(x)`.
    pub fn base<G: PrimeGroup>(&self) -> G::Element {
        hash_to_group::<G>(&self.0)
    }
}

impl fmt::Debug for PrfInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrfInput({} bytes)", self.0.len())
    }
}

/// A 256-bit file key. Wiped on drop, never printed.
#[derive(Clone)]
pub struct DerivedKey(Zeroizing<[u8; 32]>);

impl DerivedKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        DerivedKey(Zeroizing::new(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl PartialEq for DerivedKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.ct_eq(&*other.0).into()
    }
}

impl Eq for DerivedKey {}

impl fmt::Debug for DerivedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DerivedKey(..)")
    }
}

/// The secondary's answer `(B, π)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Evaluation<G: PrimeGroup> {
    pub element: G::Element,
    pub proof: DleqProof<G>,
}

/// `H(x, P)` under the key-derivation tag.
pub fn key_from_point<G: PrimeGroup>(x: &PrfInput, point: &G::Element) -> DerivedKey {
    let p = G::encode_element(point);
    DerivedKey::from_bytes(hash_256(DST_KDF, &[x.as_bytes(), &p]))
}

/// Secondary step: `B = k_D·H'(x)` and a proof that `B` and `pk` share `k_D`.
///
/// Callers are responsible for having admitted the request under the local
/// approval policy first.
pub fn respond<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    x: &PrfInput,
    k_d: G::Scalar,
    rng: &mut R,
) -> Result<Evaluation<G>> {
    let base = x.base::<G>();
    respond_at::<G, R>(&base, k_d, rng)
}

/// [`respond`] for a precomputed `H'(x)`.
pub fn respond_at<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    base: &G::Element,
    k_d: G::Scalar,
    rng: &mut R,
) -> Result<Evaluation<G>> {
    let element = k_d * *base;
    let proof = dleq::prove::<G, R>(&G::generator(), k_d, base, &element, rng)?;
    Ok(Evaluation { element, proof })
}

/// Primary step. Returns [`Error::BadProof`] without computing anything
/// key-dependent when the proof fails.
pub fn finish<G: PrimeGroup>(
    x: &PrfInput,
    k_c: G::Scalar,
    pk: &G::Element,
    eval: &Evaluation<G>,
) -> Result<DerivedKey> {
    let base = x.base::<G>();
    if !dleq::verify::<G>(&G::generator(), &base, &eval.element, &eval.proof, pk) {
        return Err(Error::BadProof);
    }
    Ok(key_from_point::<G>(x, &(eval.element + k_c * base)))
}

/// [`finish`] over wire encodings of `B` and `π`.
pub fn finish_encoded<G: PrimeGroup>(
    x: &PrfInput,
    k_c: G::Scalar,
    pk: &G::Element,
    element: &[u8],
    proof: &[u8],
) -> Result<DerivedKey> {
    let eval = Evaluation {
        element: G::decode_element(element)?,
        proof: DleqProof::<G>::from_bytes(proof)?,
    };
    finish::<G>(x, k_c, pk, &eval)
}

/// Single-party reference evaluation `H(x, Φ·H'(x))`, used only to check the
/// two-party protocol against.
#[cfg(any(test, feature = "oracle"))]
pub fn oracle<G: PrimeGroup>(x: &PrfInput, phi: G::Scalar) -> DerivedKey {
    key_from_point::<G>(x, &(phi * x.base::<G>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{random_scalar, Ristretto255, Toy101, ZmodElement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type T = Toy101;
    type R = Ristretto255;

    /// Finds a PRF input whose toy base point is `target`.
    fn toy_input_with_base(target: u32) -> PrfInput {
        (0u32..)
            .map(|i| PrfInput::new(&i.to_be_bytes(), b"toy-seed"))
            .find(|x| x.base::<T>().value() == target)
            .unwrap()
    }

    #[test]
    fn input_framing() {
        let x = PrfInput::new(b"t", b"ss");
        let mut expected = PRF_INPUT_TAG.to_vec();
        expected.extend_from_slice(&[0, 0, 0, 1, b't', 0, 0, 0, 2, b's', b's']);
        assert_eq!(x.as_bytes(), expected.as_slice());
        assert_ne!(PrfInput::new(b"ab", b"c"), PrfInput::new(b"a", b"bc"));
    }

    #[test]
    fn toy_two_paths_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(30);
        let x = toy_input_with_base(13);
        let (k_c, k_d) = (T::scalar_from_u64(4), T::scalar_from_u64(7));
        let eval = respond::<T, _>(&x, k_d, &mut rng).unwrap();
        assert_eq!(eval.element, ZmodElement::new(91));
        let combined = eval.element + k_c * x.base::<T>();
        assert_eq!(combined, ZmodElement::new(42));
        let phi = k_c + k_d;
        assert_eq!((phi * x.base::<T>()).value(), 42);
        let pk = k_d * T::generator();
        let key = finish::<T>(&x, k_c, &pk, &eval).unwrap();
        assert_eq!(key, key_from_point::<T>(&x, &ZmodElement::new(42)));
        assert_eq!(key, oracle::<T>(&x, phi));
    }

    #[test]
    fn zero_shares() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let x = PrfInput::new(b"tag", b"seed");
        let zero = R::scalar_from_u64(0);
        let eval = respond::<R, _>(&x, zero, &mut rng).unwrap();
        assert_eq!(eval.element, R::identity());
        let key = finish::<R>(&x, zero, &R::identity(), &eval).unwrap();
        assert_eq!(key, key_from_point::<R>(&x, &R::identity()));
        assert_eq!(oracle::<R>(&x, zero), key);

        let k_d = random_scalar::<R, _>(&mut rng).unwrap();
        let eval = respond::<R, _>(&x, k_d, &mut rng).unwrap();
        let key = finish::<R>(&x, zero, &(k_d * R::generator()), &eval).unwrap();
        assert_eq!(key, key_from_point::<R>(&x, &eval.element));
    }

    #[test]
    fn repeated_requests_share_b_not_proof() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let x = PrfInput::new(b"tag", b"seed");
        let k_d = random_scalar::<R, _>(&mut rng).unwrap();
        let e1 = respond::<R, _>(&x, k_d, &mut rng).unwrap();
        let e2 = respond::<R, _>(&x, k_d, &mut rng).unwrap();
        assert_eq!(e1.element, e2.element);
        assert_ne!(e1.proof, e2.proof);
    }

    #[test]
    fn tampered_element_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let x = PrfInput::new(b"tag", b"seed");
        let k_c = random_scalar::<R, _>(&mut rng).unwrap();
        let k_d = random_scalar::<R, _>(&mut rng).unwrap();
        let mut eval = respond::<R, _>(&x, k_d, &mut rng).unwrap();
        eval.element += R::generator();
        assert_eq!(
            finish::<R>(&x, k_c, &(k_d * R::generator()), &eval),
            Err(Error::BadProof)
        );
    }

    #[test]
    fn encoded_errors_are_distinct_from_bad_proof() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let x = PrfInput::new(b"tag", b"seed");
        let k_d = random_scalar::<R, _>(&mut rng).unwrap();
        let eval = respond::<R, _>(&x, k_d, &mut rng).unwrap();
        let pk = k_d * R::generator();
        let zero = R::scalar_from_u64(0);
        let b = R::encode_element(&eval.element);
        let proof = eval.proof.to_bytes();
        assert!(finish_encoded::<R>(&x, zero, &pk, &b, &proof).is_ok());
        assert!(matches!(
            finish_encoded::<R>(&x, zero, &pk, &[0xff; 32], &proof),
            Err(Error::InvalidEncoding { .. })
        ));
        assert_eq!(
            finish_encoded::<R>(&x, zero, &(pk + pk), &b, &proof),
            Err(Error::BadProof)
        );
    }

    #[test]
    fn toy_every_wrong_share_is_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let x = toy_input_with_base(13);
        let k_d = T::scalar_from_u64(7);
        let pk = k_d * T::generator();
        for wrong in (0u64..101).filter(|v| *v != 7) {
            let eval = respond::<T, _>(&x, T::scalar_from_u64(wrong), &mut rng).unwrap();
            assert_eq!(
                finish::<T>(&x, T::scalar_from_u64(4), &pk, &eval),
                Err(Error::BadProof),
                "k_D* = {wrong}"
            );
        }
    }
}
