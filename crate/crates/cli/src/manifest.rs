//! Per-command manifests listing the effective inputs and every output.

use std::path::{Path, PathBuf};

use anyhow::Result;
use chrono::{SecondsFormat, Utc};
use maccal_core::report::write_file;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            args: std::env::args().collect(),
            config: Value::Null,
            seed: None,
            config_hash: None,
            started_at: now(),
            finished_at: String::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes `contents` to `path` and records it as an output.
    pub fn emit(&mut self, path: &Path, contents: &str) -> Result<()> {
        write_file(path, contents)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Checks that every listed output exists, then writes the manifest.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        for out in &self.outputs {
            anyhow::ensure!(out.is_file(), "expected output {} was not written", out.display());
        }
        self.finished_at = now();
        let mut json = serde_json::to_string_pretty(&self)?;
        json.push('\n');
        write_file(path, &json)?;
        Ok(())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
