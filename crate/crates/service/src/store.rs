//! Single-directory store: content-addressed blobs plus one JSON file per
//! script and session record.
//!
//! ```text
//! <root>/blobs/<sha256>
//! <root>/scripts/<id>.json
//! <root>/sessions/<id>.json
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["blobs", "scripts", "sessions"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Store `bytes` under their SHA-256 digest and return it.
    pub fn put_blob(&self, bytes: &[u8]) -> io::Result<String> {
        let hash = blob_hash(bytes);
        let path = self.root.join("blobs").join(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get_blob(&self, hash: &str) -> io::Result<Vec<u8>> {
        fs::read(self.root.join("blobs").join(hash))
    }

    pub fn put<T: Serialize>(&self, kind: &str, id: &str, value: &T) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        write_atomic(&self.root.join(kind).join(format!("{id}.json")), &bytes)
    }

    /// Every record of `kind`, in file-name order. Unreadable files are
    /// skipped with a warning.
    pub fn load_all<T: DeserializeOwned>(&self, kind: &str) -> io::Result<Vec<T>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.root.join(kind))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut out = Vec::new();
        for p in paths {
            match fs::read(&p).map_err(io::Error::other).and_then(|b| serde_json::from_slice(&b).map_err(io::Error::other)) {
                Ok(v) => out.push(v),
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        Ok(out)
    }
}

/// Same digest as the corpus `source_hash` for text blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4()));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}
