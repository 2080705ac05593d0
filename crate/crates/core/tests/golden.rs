//! Frozen test vectors. The expected values were computed by a separate
//! implementation of the framing (u32 big-endian length prefixes) on top of
//! SHA-256/SHA-512, and are also recomputed inline here with `sha2` directly.

use std::collections::HashMap;

use sha2::{Digest, Sha256, Sha512};
use twofe_core::coin_toss::commit;
use twofe_core::group::{
    hash_256, hash_to_group, hash_to_scalar, PrimeGroup, Ristretto255, Toy101, DST_COMMIT,
    DST_KDF, DST_NIZK,
};

fn vectors() -> HashMap<String, String> {
    include_str!("golden/vectors.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().to_owned(), it.next().unwrap().to_owned())
        })
        .collect()
}

fn framed(domain: &[u8], parts: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in std::iter::once(&domain).chain(parts.iter()) {
        out.extend_from_slice(&(p.len() as u32).to_be_bytes());
        out.extend_from_slice(p);
    }
    out
}

#[test]
fn commitment_of_all_zero_preimage() {
    let v = vectors();
    let c = commit(&[0u8; 32]).unwrap();
    assert_eq!(hex::encode(c.0), v["commit_all_zero"]);
    let direct: [u8; 32] = Sha256::digest(framed(DST_COMMIT, &[&[0u8; 32]])).into();
    assert_eq!(c.0, direct);
}

#[test]
fn hash_to_scalar_vector() {
    let v = vectors();
    let s = hash_to_scalar::<Ristretto255>(DST_NIZK, &[b"golden", b"vector"]);
    assert_eq!(hex::encode(Ristretto255::encode_scalar(&s)), v["hash_to_scalar_nizk"]);
}

#[test]
fn hash_to_group_vectors() {
    let v = vectors();
    let e = hash_to_group::<Ristretto255>(b"golden");
    assert_eq!(hex::encode(Ristretto255::encode_element(&e)), v["hash_to_group_ristretto"]);

    let toy = hash_to_group::<Toy101>(b"golden");
    assert_eq!(toy.value().to_string(), v["hash_to_group_toy101"]);
    let wide = Sha512::digest(framed(b"2FE-H1", &[b"golden", &[0, 0, 0, 0]]));
    let expected = 1 + wide.iter().fold(0u32, |acc, b| (acc * 256 + *b as u32) % 100);
    assert_eq!(toy.value(), expected);
}

#[test]
fn kdf_hash_vector() {
    let v = vectors();
    assert_eq!(hex::encode(hash_256(DST_KDF, &[b"x", b"y"])), v["hash_256_kdf_x_y"]);
}
