//! Run manifests: what a command read, what it wrote, and digests of both.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use restitch_core::io::{sha256_file, sha256_hex, write_json};
use restitch_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run.json";
const RUN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: Option<u64>,
    /// Resolved options after merging the config file and flags.
    pub config: serde_json::Value,
    pub config_digest: String,
    pub inputs: Vec<Artifact>,
    /// Paths relative to the output directory.
    pub outputs: Vec<Artifact>,
    pub wall_clock_secs: f64,
}

/// Files under `dir`, sorted, relative to it, skipping the run manifest.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for e in entries {
            let path = e
                .map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?
                .path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path != root.join(RUN_MANIFEST) {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn slash(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Digest of a file, or of a directory's sorted `path sha256` listing.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut listing = String::new();
        for rel in files_under(path)? {
            listing.push_str(&format!(
                "{} {}\n",
                slash(&rel),
                sha256_file(&path.join(&rel))?
            ));
        }
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        sha256_file(path)
    }
}

pub struct Recorder {
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

impl Recorder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Recorder {
            command: command.to_string(),
            started: Instant::now(),
            inputs: Vec::new(),
            seed: None,
            config,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `dir/run.json` listing every file now in `dir`.
    pub fn finish(&self, dir: &Path, outcome: &Result<()>) -> Result<RunManifest> {
        let inputs = self
            .inputs
            .iter()
            .filter(|p| p.exists())
            .map(|p| {
                Ok(Artifact {
                    path: p.display().to_string(),
                    sha256: digest_path(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = files_under(dir)?
            .into_iter()
            .map(|rel| {
                Ok(Artifact {
                    sha256: sha256_file(&dir.join(&rel))?,
                    path: slash(&rel),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let canonical = serde_json::to_string(&self.config).unwrap_or_default();
        let manifest = RunManifest {
            format_version: RUN_VERSION,
            command: self.command.clone(),
            status: if outcome.is_ok() { "ok" } else { "failed" }.into(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            seed: self.seed,
            config_digest: sha256_hex(canonical.as_bytes()),
            config: self.config.clone(),
            inputs,
            outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join(RUN_MANIFEST), &manifest)?;
        Ok(manifest)
    }
}

/// Re-hashes every listed output; errors name the first mismatch.
pub fn verify(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST);
    let m: RunManifest = restitch_core::io::read_json(&path)?;
    for a in &m.outputs {
        let got = sha256_file(&dir.join(&a.path))?;
        if got != a.sha256 {
            return Err(Error::Corruption {
                path: dir.join(&a.path),
                detail: format!("digest {got} does not match run manifest {}", a.sha256),
            });
        }
    }
    let listed: Vec<&str> = m.outputs.iter().map(|a| a.path.as_str()).collect();
    for rel in files_under(dir)? {
        if !listed.contains(&slash(&rel).as_str()) {
            return Err(Error::Corruption {
                path: dir.join(&rel),
                detail: "file is not listed in the run manifest".into(),
            });
        }
    }
    Ok(m)
}
