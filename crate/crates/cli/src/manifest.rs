use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub config_file: Option<String>,
    pub overrides: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub out_dir: String,
    pub outputs: Vec<String>,
    pub version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            inputs: Vec::new(),
            config_file: None,
            overrides: BTreeMap::new(),
            seed: None,
            out_dir: out_dir.display().to_string(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }
}
