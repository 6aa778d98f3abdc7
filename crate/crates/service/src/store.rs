//! Append-only NDJSON snapshot stores.
//!
//! Each mutation appends the full new state of one resource; on load the
//! last line per key wins.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::marker::PhantomData;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct NdjsonStore<T> {
    path: PathBuf,
    writer: Mutex<()>,
    _items: PhantomData<fn(T)>,
}

impl<T: Serialize + DeserializeOwned> NdjsonStore<T> {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        NdjsonStore {
            path: path.into(),
            writer: Mutex::new(()),
            _items: PhantomData,
        }
    }

    /// Latest snapshot per key, in key order.
    pub fn load(&self, key: impl Fn(&T) -> String) -> Result<BTreeMap<String, T>, String> {
        let mut out = BTreeMap::new();
        if !self.path.exists() {
            return Ok(out);
        }
        let text = fs::read_to_string(&self.path).map_err(|e| format!("{}: {e}", self.path.display()))?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: T =
                serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", self.path.display(), n + 1))?;
            out.insert(key(&item), item);
        }
        Ok(out)
    }

    pub fn append(&self, item: &T) -> Result<(), String> {
        let line = serde_json::to_string(item).map_err(|e| e.to_string())?;
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| format!("{}: {e}", self.path.display()))?;
        writeln!(file, "{line}").map_err(|e| format!("{}: {e}", self.path.display()))?;
        file.sync_data().map_err(|e| format!("{}: {e}", self.path.display()))
    }
}
