use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_NAME: &str = "run.json";

/// One per command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
    pub peak_memory_bytes: Option<u64>,
    pub threads: usize,
}

pub struct RunTracker {
    manifest: RunManifest,
    started: Instant,
}

impl RunTracker {
    pub fn new(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                status: "running".into(),
                config_path: None,
                config_hash: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed: None,
                started_unix_s: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                wall_time_s: 0.0,
                peak_memory_bytes: None,
                threads: rayon::current_num_threads(),
            },
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, path: Option<&Path>, hash: String) {
        self.manifest.config_path = path.map(Path::to_path_buf);
        self.manifest.config_hash = Some(hash);
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    /// Writes `dir/run.json` with the final status.
    pub fn finish(mut self, dir: &Path, status: &str) -> Result<()> {
        self.manifest.status = status.to_string();
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        self.manifest.peak_memory_bytes = peak_memory_bytes();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Peak resident set size from `/proc/self/status`, where available.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
