use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use eastlab::corpus::io::split_path;
use eastlab::corpus::SplitKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a command and check its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration, by section.
    pub config: BTreeMap<String, serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub corpus_hash: Option<String>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            config: BTreeMap::new(),
            seeds: BTreeMap::new(),
            corpus_hash: None,
            checkpoint_hashes: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            elapsed_seconds: 0.0,
        }
    }

    pub fn with_config<T: Serialize>(mut self, section: &str, value: &T) -> Self {
        self.config.insert(
            section.to_string(),
            serde_json::to_value(value).expect("config serializes"),
        );
        self
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn read(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Hash over the three split files in train, validation, test order.
pub fn corpus_hash(dir: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for kind in SplitKind::ALL {
        h.update(sha256_file(&split_path(dir, kind))?.as_bytes());
    }
    Ok(hex(&h.finalize()))
}
