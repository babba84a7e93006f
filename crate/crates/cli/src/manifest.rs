//! Run manifests: the resolved configuration, content hashes of every
//! input, and run diagnostics. Two runs whose `config` and `inputs`
//! sections agree produce byte-identical primary outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::SystemTime;

use serde::Serialize;
use sha2::{Digest, Sha256};

use voxdiff_core::error::{Error, Result};

use crate::util::write_atomic;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path → SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_transitions: Option<usize>,
    pub run: RunInfo,
}

#[derive(Serialize)]
pub struct RunInfo {
    pub created_unix: u64,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            plan_transitions: None,
            run: RunInfo {
                created_unix: SystemTime::now()
                    .duration_since(SystemTime::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                wall_time_secs: 0.0,
            },
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<output>.manifest.json` next to the primary output.
    pub fn write_for(&self, primary_output: &Path) -> Result<()> {
        let mut name = primary_output.as_os_str().to_os_string();
        name.push(".manifest.json");
        self.write_to(Path::new(&name))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        write_atomic(path, &json)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
