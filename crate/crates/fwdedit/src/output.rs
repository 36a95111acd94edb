//! Staged, all-or-nothing output writing, CSV/JSON helpers and manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FwdError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Writes through a sibling temporary file and a rename, so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut fs::File) -> std::io::Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    let res = fs::File::create(&tmp).and_then(|mut f| {
        body(&mut f)?;
        f.sync_all()
    });
    if let Err(e) = res.and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(FwdError::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub created_unix: u64,
    pub inputs: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FwdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FwdError::format(path, e.to_string()))
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }
}

fn now_unix() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Collects a command's outputs in memory and writes them together with a
/// manifest on [`Staging::commit`]. Nothing touches the output directory
/// before that, and a failed commit removes whatever it already wrote.
pub struct Staging {
    dir: PathBuf,
    config_hash: String,
    files: Vec<(String, String, Vec<u8>)>,
}

impl Staging {
    pub fn new(dir: &Path, config_hash: &str) -> Self {
        Staging {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            files: Vec::new(),
        }
    }

    pub fn bytes(&mut self, name: &str, file: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), file.into(), bytes));
    }

    /// JSON document `{"config_hash": .., key: value}`.
    pub fn json<T: Serialize>(&mut self, name: &str, file: &str, key: &str, value: &T) -> Result<()> {
        let doc = serde_json::json!({ "config_hash": self.config_hash, key: value });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| FwdError::Config(e.to_string()))?;
        text.push('\n');
        self.bytes(name, file, text.into_bytes());
        Ok(())
    }

    /// CSV with a `# config_hash=..` comment row ahead of the header.
    pub fn csv(&mut self, name: &str, file: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let bytes = csv_bytes(&self.config_hash, header, rows)?;
        self.bytes(name, file, bytes);
        Ok(())
    }

    pub fn commit(self, command: &str, inputs: Vec<String>) -> Result<ExperimentManifest> {
        fs::create_dir_all(&self.dir).map_err(|e| FwdError::io(&self.dir, e))?;
        let mut done: Vec<PathBuf> = Vec::new();
        let mut artifacts = Vec::new();
        let result = (|| {
            for (name, file, bytes) in &self.files {
                let path = self.dir.join(file);
                write_atomic(&path, |f| f.write_all(bytes))?;
                done.push(path);
                artifacts.push(Artifact {
                    name: name.clone(),
                    path: file.clone(),
                    sha256: sha256_hex(bytes),
                });
            }
            let manifest = ExperimentManifest {
                command: command.into(),
                config_hash: self.config_hash.clone(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                created_unix: now_unix(),
                inputs,
                artifacts,
            };
            let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| FwdError::Config(e.to_string()))?;
            text.push('\n');
            write_atomic(&self.dir.join(MANIFEST), |f| f.write_all(text.as_bytes()))?;
            Ok(manifest)
        })();
        if result.is_err() {
            for p in done {
                let _ = fs::remove_file(p);
            }
        }
        result
    }
}

pub fn csv_bytes(config_hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("# config_hash={config_hash}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut out);
        let err = |e: csv::Error| FwdError::Config(e.to_string());
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| FwdError::Config(e.to_string()))?;
    }
    Ok(out)
}

/// Reads the payload stored under `key` in a document written by
/// [`Staging::json`].
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FwdError::io(path, e))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| FwdError::format(path, e.to_string()))?;
    let value = doc
        .get_mut(key)
        .map(serde_json::Value::take)
        .ok_or_else(|| FwdError::format(path, format!("missing key '{key}'")))?;
    serde_json::from_value(value).map_err(|e| FwdError::format(path, e.to_string()))
}
