//! Per-run provenance manifests.
//!
//! Every command that writes files also writes a run manifest beside its
//! primary output: the subcommand, the exact argv, a hash of the effective
//! configuration after flag/file merging, SHA-256 of every input and output
//! file, the seed in play, the tool version, and wall-clock. `fpt verify`
//! re-hashes all recorded files later, so a results directory can always be
//! audited against the run that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fpt_core::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// SHA-256 of the effective configuration (canonical JSON, after any
    /// config file and flag overrides are merged). Provenance only; file
    /// integrity is carried by `inputs` and `outputs`.
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_clock_ms: u64,
    /// Path to SHA-256 for every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 for every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects run facts while a command executes; hashing happens at the end
/// so output files are hashed in their final state.
pub struct Recorder {
    command: String,
    config: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, started: Instant) -> Self {
        Self {
            command: command.to_string(),
            config: String::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started,
        }
    }

    /// Canonical JSON of the effective configuration.
    pub fn set_config(&mut self, canonical_json: String) {
        self.config = canonical_json;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn add_input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes every recorded file and writes the manifest.
    pub fn write(self, manifest_path: &Path) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), file_sha256(p)?);
        }
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(p.display().to_string(), file_sha256(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().skip(1).collect(),
            config_sha256: hex::encode(Sha256::digest(self.config.as_bytes())),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_ms: self.started.elapsed().as_millis() as u64,
            inputs,
            outputs,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(manifest_path, json).map_err(|e| Error::Io {
            path: manifest_path.into(),
            source: e,
        })
    }
}

/// Where the run manifest accompanying an output lives: `<dir>/run.json`
/// for directory outputs, `<file>.run.json` otherwise.
pub fn manifest_path_for(primary_out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        primary_out.join("run.json")
    } else {
        let mut os = primary_out.as_os_str().to_os_string();
        os.push(".run.json");
        PathBuf::from(os)
    }
}

/// Re-hashes every file recorded in a run manifest, printing one `ok` line
/// per verified file. The first mismatch aborts with a checksum error.
pub fn verify_manifest(path: &Path) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let manifest: RunManifest = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    let mut checked = 0usize;
    for (file, expected) in manifest.inputs.iter().chain(manifest.outputs.iter()) {
        let found = file_sha256(Path::new(file))?;
        if &found != expected {
            return Err(Error::ChecksumMismatch {
                path: file.into(),
                expected: expected.clone(),
                found,
            });
        }
        println!("ok {file}");
        checked += 1;
    }
    println!(
        "verified {checked} files recorded by {} ({})",
        manifest.command,
        path.display()
    );
    Ok(checked)
}
