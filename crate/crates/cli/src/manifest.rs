use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// Everything needed to rerun a command: its arguments, resolved
/// configuration, seed and tool versions, plus what it read and wrote.
/// No timestamps, so identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: u64,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: impl Serialize) -> Result<Self> {
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            threads: rayon::current_num_threads(),
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::metadata(path)
            .with_context(|| format!("stat {}", path.display()))?
            .len();
        self.outputs.push(Artifact { path: path.to_path_buf(), bytes });
        Ok(())
    }

    /// Writes `<dir>/<name>.manifest.json` and returns its path.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{name}.manifest.json"));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
