//! Append-only run ledger (`ledger.toml`, one `[[entry]]` per event).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FILE: &str = "ledger.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub stage: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub wall_seconds: f64,
    pub config_hash: String,
    #[serde(default)]
    pub model_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Maps emitted per second of wall time, benchmark entries only.
    pub maps_per_second: Option<f64>,
    pub repetitions: Option<usize>,
}

impl LedgerEntry {
    pub fn new(stage: &str, config_hash: &str) -> Self {
        let now = unix_now();
        LedgerEntry {
            stage: stage.to_string(),
            started: now,
            finished: now,
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }

    pub fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn model(mut self, kind: &str, hash: &str) -> Self {
        self.model_hashes.insert(kind.to_string(), hash.to_string());
        self
    }

    pub fn finish(mut self, wall_seconds: f64) -> Self {
        self.finished = unix_now();
        self.wall_seconds = wall_seconds;
        self
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Serialize, Deserialize)]
struct LedgerFile {
    #[serde(default)]
    entry: Vec<LedgerEntry>,
}

pub struct RunLedger {
    path: PathBuf,
}

impl RunLedger {
    pub fn open(run_dir: &Path) -> Self {
        RunLedger {
            path: run_dir.join(FILE),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one entry; earlier entries are never rewritten.
    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = toml::to_string(&LedgerFile {
            entry: vec![entry.clone()],
        })
        .map_err(|e| Error::persistence(&self.path, e))?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(format!("\n{text}").as_bytes()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.is_file() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let f: LedgerFile = toml::from_str(&text).map_err(|e| Error::persistence(&self.path, e))?;
        Ok(f.entry)
    }
}
