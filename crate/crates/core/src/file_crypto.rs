//! File encryption under derived keys, file tags, and the filename catalog.
//!
//! A file is sealed with ChaCha20-Poly1305 in 1 MiB chunks. Every file key is
//! derived once for one `(t, s)` pair, so nonces only need to be unique within
//! a file: chunk `i` uses nonce `i`. The associated data binds the tag, the
//! chunk index and whether the chunk is the last one, which stops chunk
//! reordering, truncation and splicing between files.
//!
//! Record layout: `version ‖ t ‖ s ‖ chunk_count (u32 BE) ‖ chunks`. Every
//! chunk but the last holds a full 1 MiB of plaintext; an empty file is one
//! empty chunk.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand_core::{CryptoRng, RngCore};
use zeroize::Zeroizing;

use crate::error::{Error, Result};
use crate::group::fill_random;
use crate::tprf::DerivedKey;

pub const RECORD_VERSION: u8 = 1;
pub const TAG_LEN: usize = 16;
pub const SEED_LEN: usize = 32;
pub const CHUNK_LEN: usize = 1 << 20;
pub const AEAD_OVERHEAD: usize = 16;
pub const HEADER_LEN: usize = 1 + TAG_LEN + SEED_LEN + 4;

const CATALOG_VERSION: u8 = 1;
const CATALOG_AD: &[u8] = b"2FE-CATALOG";
const NONCE_LEN: usize = 12;

/// Public identifier of a stored ciphertext.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileTag(pub [u8; TAG_LEN]);

/// Tag under which the encrypted catalog is stored.
pub const CATALOG_TAG: FileTag = FileTag([0; TAG_LEN]);

/// Tag whose derived key wraps the vault copy of the catalog key.
pub const CATALOG_WRAP_TAG: FileTag = FileTag([0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);

impl FileTag {
    /// Uniform tag, never one of the reserved tags.
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Result<Self> {
        loop {
            let mut t = [0u8; TAG_LEN];
            fill_random(rng, &mut t)?;
            let tag = FileTag(t);
            if !tag.is_reserved() {
                return Ok(tag);
            }
        }
    }

    pub fn is_reserved(&self) -> bool {
        *self == CATALOG_TAG || *self == CATALOG_WRAP_TAG
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let t: [u8; TAG_LEN] = bytes.try_into().map_err(|_| Error::BadLength {
            expected: TAG_LEN,
            actual: bytes.len(),
        })?;
        Ok(FileTag(t))
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bad = Error::InvalidEncoding { what: "tag" };
        if s.len() != TAG_LEN * 2 || !s.is_ascii() {
            return Err(bad);
        }
        let mut t = [0u8; TAG_LEN];
        for (i, byte) in t.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad.clone())?;
        }
        Ok(FileTag(t))
    }
}

impl fmt::Debug for FileTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FileTag({})", self.to_hex())
    }
}

impl fmt::Display for FileTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Parsed record header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordHeader {
    pub tag: FileTag,
    pub seed: [u8; SEED_LEN],
    pub chunk_count: u32,
}

impl RecordHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = RECORD_VERSION;
        out[1..1 + TAG_LEN].copy_from_slice(&self.tag.0);
        out[1 + TAG_LEN..1 + TAG_LEN + SEED_LEN].copy_from_slice(&self.seed);
        out[HEADER_LEN - 4..].copy_from_slice(&self.chunk_count.to_be_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Malformed("file record header"));
        }
        if bytes[0] != RECORD_VERSION {
            return Err(Error::Malformed("file record version"));
        }
        let tag = FileTag::from_slice(&bytes[1..1 + TAG_LEN])?;
        let seed = bytes[1 + TAG_LEN..1 + TAG_LEN + SEED_LEN].try_into().unwrap();
        let chunk_count = u32::from_be_bytes(bytes[HEADER_LEN - 4..HEADER_LEN].try_into().unwrap());
        if chunk_count == 0 {
            return Err(Error::Malformed("file record chunk count"));
        }
        Ok(RecordHeader {
            tag,
            seed,
            chunk_count,
        })
    }
}

/// Number of chunks for a plaintext of `len` bytes.
pub fn chunk_count_for(len: u64) -> Result<u32> {
    let n = len.div_ceil(CHUNK_LEN as u64).max(1);
    u32::try_from(n).map_err(|_| Error::Malformed("file too large"))
}

/// Size of the sealed record for a plaintext of `len` bytes.
pub fn sealed_len(len: u64) -> Result<u64> {
    let chunks = chunk_count_for(len)? as u64;
    Ok(HEADER_LEN as u64 + len + chunks * AEAD_OVERHEAD as u64)
}

fn chunk_nonce(index: u32) -> Nonce {
    let mut n = [0u8; NONCE_LEN];
    n[NONCE_LEN - 4..].copy_from_slice(&index.to_be_bytes());
    Nonce::from(n)
}

fn chunk_ad(tag: &FileTag, index: u32, last: bool) -> [u8; TAG_LEN + 5] {
    let mut ad = [0u8; TAG_LEN + 5];
    ad[..TAG_LEN].copy_from_slice(&tag.0);
    ad[TAG_LEN..TAG_LEN + 4].copy_from_slice(&index.to_be_bytes());
    ad[TAG_LEN + 4] = last as u8;
    ad
}

struct ChunkCipher<'a> {
    aead: ChaCha20Poly1305,
    tag: &'a FileTag,
}

impl<'a> ChunkCipher<'a> {
    fn new(key: &DerivedKey, tag: &'a FileTag) -> Self {
        ChunkCipher {
            aead: ChaCha20Poly1305::new(Key::from_slice(key.as_bytes())),
            tag,
        }
    }

    fn seal(&self, index: u32, last: bool, chunk: &[u8]) -> Vec<u8> {
        let ad = chunk_ad(self.tag, index, last);
        self.aead
            .encrypt(&chunk_nonce(index), Payload { msg: chunk, aad: &ad })
            .expect("chunk within AEAD limits")
    }

    fn open(&self, index: u32, last: bool, chunk: &[u8]) -> Result<Zeroizing<Vec<u8>>> {
        let ad = chunk_ad(self.tag, index, last);
        self.aead
            .decrypt(&chunk_nonce(index), Payload { msg: chunk, aad: &ad })
            .map(Zeroizing::new)
            .map_err(|_| Error::AuthFailure)
    }
}

/// Seals `m` into a complete record.
pub fn seal(key: &DerivedKey, tag: &FileTag, seed: &[u8; SEED_LEN], m: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(sealed_len(m.len() as u64).unwrap_or(0) as usize);
    seal_stream(key, tag, seed, &mut &m[..], m.len() as u64, &mut out)
        .expect("in-memory sealing cannot fail");
    out
}

/// Opens a complete record. The tag and seed stored in the record must match
/// the ones the key was derived for.
pub fn open(key: &DerivedKey, tag: &FileTag, record: &[u8]) -> Result<Zeroizing<Vec<u8>>> {
    let mut out = Zeroizing::new(Vec::with_capacity(record.len()));
    open_stream(key, tag, &mut &record[..], &mut *out)?;
    Ok(out)
}

/// Streaming [`seal`]: reads exactly `len` bytes from `input`.
pub fn seal_stream<R: Read, W: Write>(
    key: &DerivedKey,
    tag: &FileTag,
    seed: &[u8; SEED_LEN],
    input: &mut R,
    len: u64,
    out: &mut W,
) -> Result<()> {
    let chunk_count = chunk_count_for(len)?;
    let header = RecordHeader {
        tag: *tag,
        seed: *seed,
        chunk_count,
    };
    out.write_all(&header.to_bytes()).map_err(io_err)?;
    let cipher = ChunkCipher::new(key, tag);
    let mut buf = Zeroizing::new(vec![0u8; len.min(CHUNK_LEN as u64) as usize]);
    let mut remaining = len;
    for index in 0..chunk_count {
        let n = remaining.min(CHUNK_LEN as u64) as usize;
        input.read_exact(&mut buf[..n]).map_err(io_err)?;
        remaining -= n as u64;
        let last = index + 1 == chunk_count;
        out.write_all(&cipher.seal(index, last, &buf[..n])).map_err(io_err)?;
    }
    Ok(())
}

/// Streaming [`open`]. Plaintext of a chunk is written only after that chunk
/// authenticates, but earlier chunks may already have been written when a
/// later one fails.
pub fn open_stream<R: Read, W: Write>(
    key: &DerivedKey,
    tag: &FileTag,
    input: &mut R,
    out: &mut W,
) -> Result<RecordHeader> {
    let mut header_bytes = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Malformed("file record header"))?;
    let header = RecordHeader::parse(&header_bytes)?;
    if header.tag != *tag {
        return Err(Error::AuthFailure);
    }
    let cipher = ChunkCipher::new(key, tag);
    let mut buf = Vec::new();
    for index in 0..header.chunk_count {
        let last = index + 1 == header.chunk_count;
        buf.clear();
        let full = (CHUNK_LEN + AEAD_OVERHEAD) as u64;
        let n = input.by_ref().take(full).read_to_end(&mut buf).map_err(io_err)?;
        if !last && n as u64 != full {
            return Err(Error::Malformed("truncated file record"));
        }
        if n < AEAD_OVERHEAD {
            return Err(Error::Malformed("truncated file record"));
        }
        let plain = cipher.open(index, last, &buf[..n])?;
        out.write_all(&plain).map_err(io_err)?;
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra).map_err(io_err)? != 0 {
        return Err(Error::Malformed("trailing bytes after file record"));
    }
    Ok(header)
}

fn io_err(_: std::io::Error) -> Error {
    Error::Malformed("i/o failure")
}

/// Static symmetric key for the catalog.
#[derive(Clone, PartialEq, Eq)]
pub struct CatalogKey(Zeroizing<[u8; 32]>);

impl CatalogKey {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Result<Self> {
        let mut k = Zeroizing::new([0u8; 32]);
        fill_random(rng, &mut *k)?;
        Ok(CatalogKey(k))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        CatalogKey(Zeroizing::new(bytes))
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let k: [u8; 32] = bytes.try_into().map_err(|_| Error::BadLength {
            expected: 32,
            actual: bytes.len(),
        })?;
        Ok(Self::from_bytes(k))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for CatalogKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CatalogKey(..)")
    }
}

/// Filename → tag map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    entries: BTreeMap<String, FileTag>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, returning the previous tag.
    pub fn put(&mut self, name: &str, tag: FileTag) -> Option<FileTag> {
        self.entries.insert(name.to_owned(), tag)
    }

    pub fn resolve(&self, name: &str) -> Result<FileTag> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::NameNotFound(name.to_owned()))
    }

    pub fn remove(&mut self, name: &str) -> Result<FileTag> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::NameNotFound(name.to_owned()))
    }

    /// Reverse lookup, used by the secondary to label prompts.
    pub fn name_of(&self, tag: &FileTag) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| *t == tag)
            .map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FileTag)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(u32 len ‖ name ‖ u32 len ‖ tag)*`, sorted by name.
    pub fn serialize(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Zeroizing::new(Vec::new());
        for (name, tag) in &self.entries {
            for part in [name.as_bytes(), &tag.0[..]] {
                out.extend_from_slice(&(part.len() as u32).to_be_bytes());
                out.extend_from_slice(part);
            }
        }
        out
    }

    pub fn deserialize(mut bytes: &[u8]) -> Result<Self> {
        let take = |bytes: &mut &[u8]| -> Result<Vec<u8>> {
            if bytes.len() < 4 {
                return Err(Error::Malformed("catalog"));
            }
            let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
            if bytes.len() - 4 < len {
                return Err(Error::Malformed("catalog"));
            }
            let part = bytes[4..4 + len].to_vec();
            *bytes = &bytes[4 + len..];
            Ok(part)
        };
        let mut entries = BTreeMap::new();
        while !bytes.is_empty() {
            let name = String::from_utf8(take(&mut bytes)?).map_err(|_| Error::Malformed("catalog"))?;
            let tag = FileTag::from_slice(&take(&mut bytes)?)?;
            if entries.insert(name, tag).is_some() {
                return Err(Error::Malformed("catalog"));
            }
        }
        Ok(Catalog { entries })
    }

    /// `version ‖ nonce ‖ AEAD(serialized)` under a fresh random nonce.
    pub fn seal<R: RngCore + CryptoRng + ?Sized>(
        &self,
        key: &CatalogKey,
        rng: &mut R,
    ) -> Result<Vec<u8>> {
        let mut nonce = [0u8; NONCE_LEN];
        fill_random(rng, &mut nonce)?;
        let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
        let ad = [CATALOG_AD, &[CATALOG_VERSION]].concat();
        let body = self.serialize();
        let ct = aead
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: &body, aad: &ad })
            .expect("catalog within AEAD limits");
        let mut out = Vec::with_capacity(1 + NONCE_LEN + ct.len());
        out.push(CATALOG_VERSION);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        Ok(out)
    }

    pub fn open(key: &CatalogKey, sealed: &[u8]) -> Result<Self> {
        if sealed.len() < 1 + NONCE_LEN + AEAD_OVERHEAD || sealed[0] != CATALOG_VERSION {
            return Err(Error::CatalogDecrypt);
        }
        let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
        let ad = [CATALOG_AD, &[CATALOG_VERSION]].concat();
        let body = aead
            .decrypt(
                Nonce::from_slice(&sealed[1..1 + NONCE_LEN]),
                Payload {
                    msg: &sealed[1 + NONCE_LEN..],
                    aad: &ad,
                },
            )
            .map(Zeroizing::new)
            .map_err(|_| Error::CatalogDecrypt)?;
        Self::deserialize(&body)
    }
}
