//! Run directory: output files plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    argv: &'a [String],
    config: &'a serde_json::Value,
    config_sha256: String,
    outputs: &'a [OutputEntry],
    warnings: &'a [String],
    wall_time_s: f64,
    exit_code: i32,
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunDir {
    root: PathBuf,
    outputs: Vec<OutputEntry>,
    pub warnings: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), outputs: Vec::new(), warnings: Vec::new(), started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes one output and records its hash.
    pub fn write(&mut self, name: &str, data: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, data).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.retain(|o| o.path != name);
        self.outputs.push(OutputEntry { path: name.to_string(), bytes: data.len(), sha256: sha256_hex(data) });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("json serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    /// Writes the manifest. The config hash covers its canonical JSON echo.
    pub fn finish(self, subcommand: &str, argv: &[String], config: &serde_json::Value, exit_code: i32) -> Result<(), CliError> {
        let canonical = serde_json::to_vec(config).expect("json serializes");
        let manifest = Manifest {
            tool: "percept-reach",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            argv,
            config,
            config_sha256: sha256_hex(&canonical),
            outputs: &self.outputs,
            warnings: &self.warnings,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            exit_code,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.path(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }
}
