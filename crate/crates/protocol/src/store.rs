//! Storage backends for the cloud service: ciphertext blobs and the
//! account journal.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Flat key → bytes store. Keys are `[0-9a-f/]` only.
pub trait BlobStore: Send + Sync {
    fn put(&self, key: &str, data: &[u8]) -> Result<()>;
    fn get(&self, key: &str) -> Result<Vec<u8>>;
    fn delete(&self, key: &str) -> Result<()>;
}

#[derive(Default)]
pub struct MemoryStore {
    blobs: RwLock<HashMap<String, Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BlobStore for MemoryStore {
    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        self.blobs
            .write()
            .unwrap()
            .insert(key.to_owned(), data.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        self.blobs
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or(Error::UnknownTag)
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.blobs.write().unwrap().remove(key);
        Ok(())
    }
}

/// One file per blob under a root directory.
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(DirStore { root })
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        let ok = !key.is_empty()
            && key
                .bytes()
                .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase() || b == b'/')
            && !key.starts_with('/')
            && !key.contains("//");
        if !ok {
            return Err(Error::Malformed(format!("blob key {key:?}")));
        }
        Ok(self.root.join(key))
    }
}

impl BlobStore for DirStore {
    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        let path = self.path(key)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        atomic_write(&path, data)
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        match fs::read(self.path(key)?) {
            Ok(v) => Ok(v),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::UnknownTag),
            Err(e) => Err(e.into()),
        }
    }

    fn delete(&self, key: &str) -> Result<()> {
        match fs::remove_file(self.path(key)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Minimal API of a third-party object store.
pub trait ExternalBlobApi: Send + Sync {
    fn upload(&self, path: &str, data: &[u8]) -> std::result::Result<(), String>;
    fn download(&self, path: &str) -> std::result::Result<Option<Vec<u8>>, String>;
    fn remove(&self, path: &str) -> std::result::Result<(), String>;
}

/// Pass-through adapter storing blobs in an external service under a prefix.
pub struct ExternalStore<A: ExternalBlobApi> {
    api: A,
    prefix: String,
}

impl<A: ExternalBlobApi> ExternalStore<A> {
    pub fn new(api: A, prefix: &str) -> Self {
        ExternalStore {
            api,
            prefix: prefix.trim_end_matches('/').to_owned(),
        }
    }

    pub fn api(&self) -> &A {
        &self.api
    }

    fn path(&self, key: &str) -> String {
        format!("{}/{key}", self.prefix)
    }
}

fn external(e: String) -> Error {
    Error::Io(format!("external store: {e}"))
}

impl<A: ExternalBlobApi> BlobStore for ExternalStore<A> {
    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        self.api.upload(&self.path(key), data).map_err(external)
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        self.api
            .download(&self.path(key))
            .map_err(external)?
            .ok_or(Error::UnknownTag)
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.api.remove(&self.path(key)).map_err(external)
    }
}

pub(crate) fn atomic_write(path: &Path, data: &[u8]) -> Result<()> {
    let mut tmp = path.to_path_buf().into_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Append-only JSON-lines event log plus a snapshot of the folded state.
///
/// Recovery loads `snapshot.json` (if any) and replays `journal.jsonl` on top.
/// Taking a snapshot writes the new snapshot first and then truncates the
/// journal; a crash in between only causes already-applied events to be
/// replayed onto a snapshot that contains them, so events must be idempotent.
pub struct Journal {
    dir: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open<S: DeserializeOwned, E: DeserializeOwned>(
        dir: impl Into<PathBuf>,
    ) -> Result<(Journal, Option<S>, Vec<E>)> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let snapshot = match fs::read(dir.join("snapshot.json")) {
            Ok(bytes) => Some(
                serde_json::from_slice(&bytes)
                    .map_err(|e| Error::State(format!("snapshot: {e}")))?,
            ),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let path = dir.join("journal.jsonl");
        let mut events = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line) {
                    Ok(e) => events.push(e),
                    // A torn final line from a crash mid-append is dropped.
                    Err(_) => break,
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            Journal {
                dir,
                file: Mutex::new(file),
            },
            snapshot,
            events,
        ))
    }

    pub fn append<E: Serialize>(&self, event: &E) -> Result<()> {
        let mut line = serde_json::to_vec(event).expect("event serializes");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn snapshot<S: Serialize>(&self, state: &S) -> Result<()> {
        let bytes = serde_json::to_vec(state).expect("snapshot serializes");
        let f = self.file.lock().unwrap();
        atomic_write(&self.dir.join("snapshot.json"), &bytes)?;
        f.set_len(0)?;
        f.sync_all()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct MockApi(Mutex<HashMap<String, Vec<u8>>>);

    impl ExternalBlobApi for MockApi {
        fn upload(&self, path: &str, data: &[u8]) -> std::result::Result<(), String> {
            self.0.lock().unwrap().insert(path.into(), data.into());
            Ok(())
        }
        fn download(&self, path: &str) -> std::result::Result<Option<Vec<u8>>, String> {
            Ok(self.0.lock().unwrap().get(path).cloned())
        }
        fn remove(&self, path: &str) -> std::result::Result<(), String> {
            self.0.lock().unwrap().remove(path);
            Ok(())
        }
    }

    fn exercise(store: &dyn BlobStore) {
        store.put("ab/cd", b"one").unwrap();
        assert_eq!(store.get("ab/cd").unwrap(), b"one");
        store.put("ab/cd", b"two").unwrap();
        assert_eq!(store.get("ab/cd").unwrap(), b"two");
        store.delete("ab/cd").unwrap();
        assert_eq!(store.get("ab/cd"), Err(Error::UnknownTag));
    }

    #[test]
    fn backends_behave_alike() {
        exercise(&MemoryStore::new());
        let dir = tempfile::tempdir().unwrap();
        let ds = DirStore::open(dir.path()).unwrap();
        exercise(&ds);
        assert!(ds.put("../x", b"").is_err());
        let ext = ExternalStore::new(MockApi::default(), "vault/");
        exercise(&ext);
        ext.put("00", b"x").unwrap();
        assert!(ext.api().0.lock().unwrap().contains_key("vault/00"));
    }

    #[test]
    fn journal_replays_after_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (j, snap, ev) = Journal::open::<Vec<u32>, u32>(dir.path()).unwrap();
            assert!(snap.is_none() && ev.is_empty());
            j.append(&1u32).unwrap();
            j.append(&2u32).unwrap();
            j.snapshot(&vec![1u32, 2]).unwrap();
            j.append(&3u32).unwrap();
        }
        let (_, snap, ev) = Journal::open::<Vec<u32>, u32>(dir.path()).unwrap();
        assert_eq!(snap, Some(vec![1, 2]));
        assert_eq!(ev, vec![3]);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("journal.jsonl"), "1\n2\n3").unwrap();
        fs::OpenOptions::new()
            .append(true)
            .open(dir.path().join("journal.jsonl"))
            .unwrap()
            .write_all(b"\n{\"tor")
            .unwrap();
        let (_, _, ev) = Journal::open::<(), u32>(dir.path()).unwrap();
        assert_eq!(ev, vec![1, 2, 3]);
    }
}
