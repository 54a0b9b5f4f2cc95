use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to repeat a command: its arguments, the canonical
/// config document and where the outputs went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<String>,
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled.
    serde_json::to_string(value).expect("json values serialize")
}

/// Hex SHA-256 of [`canonical_json`].
pub fn config_hash(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(canonical_json(value).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn start(command: &str, args: &[String], config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config_hash: config_hash(&config),
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, out_dir: &Path, outputs: &[&str]) -> Result<(), CliError> {
        self.finished_unix_ms = now_unix_ms();
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        write_file(&out_dir.join(MANIFEST_FILE), &text)
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}
