//! Run directory layout: every invocation writes its artifacts under one
//! directory together with a manifest recording what produced them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tuct_core::{Error, Result};

#[derive(Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    version: String,
    started_utc: String,
    wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    master_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// One run's directory: `inputs/` holds a copy of the configuration,
/// `outputs/` the artifacts, and `manifest.json` the provenance record.
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
    started: Instant,
}

impl RunDir {
    /// Create the directory, either at an explicit location or under
    /// `runs/` with a timestamped name.
    pub fn create(out_dir: Option<&Path>, tag: &str, command: &str) -> Result<Self> {
        let root = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                dir.to_path_buf()
            }
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S%3f");
                let base = PathBuf::from("runs").join(format!("{stamp}-{tag}"));
                std::fs::create_dir_all(base.parent().unwrap())?;
                claim_fresh_dir(&base)?
            }
        };
        std::fs::create_dir_all(root.join("outputs"))?;
        Ok(Self {
            root,
            manifest: Manifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_utc: chrono::Utc::now().to_rfc3339(),
                wall_seconds: 0.0,
                master_seed: None,
                workers: None,
                outputs: Vec::new(),
                extra: serde_json::Map::new(),
            },
            started: Instant::now(),
        })
    }

    /// Copy the configuration file into `inputs/` so the run is
    /// self-describing.
    pub fn copy_config(&self, source: &Path) -> Result<()> {
        let inputs = self.root.join("inputs");
        std::fs::create_dir_all(&inputs)?;
        std::fs::copy(source, inputs.join("config.toml"))?;
        Ok(())
    }

    /// Path for an output artifact, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let path = self.root.join("outputs").join(name);
        if let Some(parent) = path.parent() {
            let _ = std::fs::create_dir_all(parent);
        }
        self.manifest.outputs.push(format!("outputs/{name}"));
        path
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.manifest.master_seed = Some(seed);
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.manifest.workers = Some(workers);
    }

    pub fn record(&mut self, key: &str, value: serde_json::Value) {
        self.manifest.extra.insert(key.to_string(), value);
    }

    /// Write the manifest and return the run directory path.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        std::fs::write(self.root.join("manifest.json"), text)?;
        Ok(self.root)
    }
}

/// Create a directory that did not exist before, suffixing the name on a
/// same-millisecond collision.
fn claim_fresh_dir(base: &Path) -> Result<PathBuf> {
    for attempt in 0..100u32 {
        let candidate = if attempt == 0 {
            base.to_path_buf()
        } else {
            let name = format!(
                "{}-{attempt}",
                base.file_name().unwrap_or_default().to_string_lossy()
            );
            base.with_file_name(name)
        };
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::Config(format!(
        "could not claim a fresh run directory near {}",
        base.display()
    )))
}
