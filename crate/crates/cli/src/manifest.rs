//! One `key = value` manifest per run, written beside its outputs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rectiflow::{Error, Result};

/// `git describe` of the source tree at build time, or the crate version
/// when that was unavailable.
pub const BUILD_ID: &str = env!("RECTIFLOW_BUILD_ID");

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    started_ms: u128,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            config: BTreeMap::new(),
            outputs: Vec::new(),
            started_ms: unix_ms(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes the manifest to `path`, stamping the finish time.
    pub fn finish(&self, path: &Path) -> Result<()> {
        let io = |e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "command = {}", self.command).map_err(io)?;
        writeln!(w, "build = {BUILD_ID}").map_err(io)?;
        writeln!(w, "seed = {}", self.seed).map_err(io)?;
        writeln!(w, "started_unix_ms = {}", self.started_ms).map_err(io)?;
        writeln!(w, "finished_unix_ms = {}", unix_ms()).map_err(io)?;
        let outputs: Vec<String> = self.outputs.iter().map(|p| p.display().to_string()).collect();
        writeln!(w, "outputs = {}", outputs.join(",")).map_err(io)?;
        for (k, v) in &self.config {
            writeln!(w, "config.{k} = {v}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

