//! Persistent store of oracle responses keyed by content hash.
//!
//! On disk the cache is JSON Lines, one [`CacheEntry`] per line, appended
//! in write order. A truncated or corrupt final line (an interrupted write)
//! is dropped on open; corruption anywhere else is an error.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::oracle::DecodingParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub raw_response: String,
    pub oracle_id: String,
    pub decoding: DecodingParams,
    /// Seconds since the Unix epoch at write time. Informational only.
    pub timestamp: u64,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, String>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a cache file and load its records.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let mut valid_len = 0usize;
            let mut offset = 0usize;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                offset += line.len();
                if line.trim().is_empty() {
                    valid_len = offset;
                    continue;
                }
                let complete = line.ends_with('\n');
                match serde_json::from_str::<CacheEntry>(line.trim_end()) {
                    Ok(entry) if complete => {
                        entries.insert(entry.key, entry.raw_response);
                        valid_len = offset;
                    }
                    Ok(_) | Err(_) if i + 1 == lines.len() => {
                        tracing::warn!(path = %path.display(), "dropping truncated trailing cache record");
                    }
                    Ok(_) => unreachable!("only the final line can lack a newline"),
                    Err(e) => {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}:{}: corrupt cache record: {e}", path.display(), i + 1),
                        ))
                    }
                }
            }
            if valid_len < text.len() {
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(valid_len as u64)?;
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_owned()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    /// Record a response. Appends to the backing file when there is one.
    pub fn insert(
        &self,
        key: &str,
        raw_response: &str,
        oracle_id: &str,
        decoding: DecodingParams,
    ) -> io::Result<()> {
        if let Some(file) = &self.file {
            let entry = CacheEntry {
                key: key.to_owned(),
                raw_response: raw_response.to_owned(),
                oracle_id: oracle_id.to_owned(),
                decoding,
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut line = serde_json::to_string(&entry).map_err(io::Error::other)?;
            line.push('\n');
            let mut f = file.lock();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries
            .write()
            .insert(key.to_owned(), raw_response.to_owned());
        Ok(())
    }
}
