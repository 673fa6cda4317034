use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Result, TaskError};

/// Reads and writes performed through one [`ObjectStore`] handle (and its clones).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreCounters {
    pub writes: u64,
    pub reads: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Default)]
struct Counters {
    writes: AtomicU64,
    reads: AtomicU64,
    bytes_written: AtomicU64,
}

/// Directory-backed, write-once key → blob map. Keys are `/`-separated
/// relative paths.
///
/// A write goes to a unique temporary file which is then hard-linked to its
/// final name; the link is atomic and fails if the key exists, so readers
/// never observe partial blobs and a key can be written at most once.
#[derive(Debug, Clone)]
pub struct ObjectStore {
    root: PathBuf,
    counters: Arc<Counters>,
}

impl ObjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("tmp")).map_err(|e| io_err(&root.display().to_string(), e))?;
        Ok(ObjectStore { root, counters: Arc::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    pub fn put(&self, key: &str, bytes: &[u8]) -> Result<()> {
        let dst = self.path(key);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(key, e))?;
        }
        let tmp = self.root.join("tmp").join(uuid::Uuid::new_v4().simple().to_string());
        let written = fs::File::create(&tmp).and_then(|mut f| f.write_all(bytes));
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp);
            return Err(io_err(key, e));
        }
        let linked = fs::hard_link(&tmp, &dst);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => {
                self.counters.writes.fetch_add(1, Ordering::Relaxed);
                self.counters.bytes_written.fetch_add(bytes.len() as u64, Ordering::Relaxed);
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(TaskError::KeyExists(key.to_string())),
            Err(e) => Err(io_err(key, e)),
        }
    }

    /// `None` if the key has not been written.
    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        match fs::read(self.path(key)) {
            Ok(b) => {
                self.counters.reads.fetch_add(1, Ordering::Relaxed);
                Ok(Some(b))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(key, e)),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path(key).is_file()
    }

    pub fn counters(&self) -> StoreCounters {
        StoreCounters {
            writes: self.counters.writes.load(Ordering::Relaxed),
            reads: self.counters.reads.load(Ordering::Relaxed),
            bytes_written: self.counters.bytes_written.load(Ordering::Relaxed),
        }
    }
}

fn io_err(key: &str, source: std::io::Error) -> TaskError {
    TaskError::Store { key: key.to_string(), source }
}
