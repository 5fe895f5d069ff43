//! Run manifests: every command writes one next to its outputs with enough
//! information (command, flags, seeds, input fingerprints, tool version) to
//! re-run bit-identically.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// role -> path
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// role -> content fingerprint
    pub dataset_fingerprints: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    pub fn input(mut self, role: &str, path: impl AsRef<Path>) -> Self {
        self.inputs
            .insert(role.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn output(mut self, role: &str, path: impl AsRef<Path>) -> Self {
        self.outputs
            .insert(role.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn fingerprint(mut self, role: &str, fp: &str) -> Self {
        self.dataset_fingerprints.insert(role.to_string(), fp.to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Write as `<output>.manifest.json` (or `manifest.json` inside a dir).
    pub fn write_for(&self, output: &Path) -> Result<()> {
        let path = if output.is_dir() {
            output.join("manifest.json")
        } else {
            let mut name = output.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            output.with_file_name(name)
        };
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
