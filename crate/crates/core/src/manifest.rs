use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const TOOL_NAME: &str = "ctxprobe";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance embedded in every artifact. Replaying `args` with the recorded
/// `timestamp` reproduces the artifact byte for byte.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command-line arguments after the program name, excluding `--timestamp`.
    pub args: Vec<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Input path -> SHA-256.
    #[serde(default)]
    pub input_checksums: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, timestamp: Option<u64>) -> Self {
        Self {
            tool: TOOL_NAME.to_owned(),
            version: TOOL_VERSION.to_owned(),
            command: command.to_owned(),
            args,
            seeds: Vec::new(),
            input_checksums: BTreeMap::new(),
            timestamp: timestamp.unwrap_or_else(now),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    pub fn with_input(mut self, path: impl Into<String>, checksum: impl Into<String>) -> Self {
        self.input_checksums.insert(path.into(), checksum.into());
        self
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
