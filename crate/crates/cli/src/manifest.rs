use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const FILE_NAME: &str = "manifest.json";

/// Provenance record written into every output directory. `outputs` are the
/// primary artifacts, which reruns reproduce byte for byte; `diagnostics`
/// carry wall-clock measurements and are exempt.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub diagnostics: Vec<String>,
    pub tool_version: &'static str,
    pub timestamp_unix: u64,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            diagnostics: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION"),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn config(mut self, path: &Path) -> Self {
        self.config = Some(path.display().to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(dir.join(FILE_NAME), s)?;
        Ok(())
    }
}
