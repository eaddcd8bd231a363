use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use oodkit::checkpoint::write_atomic;
use oodkit::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, stored next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// The effective configuration, in the same text format the config
    /// file uses.
    pub config: String,
    pub started_unix: f64,
    pub elapsed_secs: f64,
    pub outputs: Vec<OutputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {} for its digest", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn version_string() -> String {
    match option_env!("OODKIT_BUILD_REV") {
        Some(rev) => format!("oodkit {} ({rev})", env!("CARGO_PKG_VERSION")),
        None => format!("oodkit {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Collects outputs while a command runs; [`RunRecorder::finish`] writes the
/// manifest last so a present manifest means the run completed.
pub struct RunRecorder {
    command: String,
    config: String,
    started_unix: f64,
    clock: Instant,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        RunRecorder {
            command: command.to_string(),
            config: cfg.to_text(),
            started_unix,
            clock: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn finish(self, manifest_path: &Path) -> Result<RunManifest> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                Ok(OutputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            version: version_string(),
            config: self.config,
            started_unix: self.started_unix,
            elapsed_secs: self.clock.elapsed().as_secs_f64(),
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(manifest_path, text.as_bytes())?;
        log::info!("wrote manifest {}", manifest_path.display());
        Ok(manifest)
    }
}

/// `<file>.manifest.json` next to a file output, `manifest.json` inside a
/// directory output.
pub fn manifest_path_for(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("manifest.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}
