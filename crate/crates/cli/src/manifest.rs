//! Per-run bookkeeping: hashed inputs, the resolved config, and the
//! manifest or error document written next to the outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stripelight::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    tool_version: &'static str,
    core_version: &'static str,
    subcommand: &'a str,
    status: &'a str,
    seed: u64,
    inputs_hash: String,
    inputs: &'a [InputRecord],
    outputs: &'a [PathBuf],
    config: &'a RunConfig,
}

#[derive(Debug, Serialize)]
struct ErrorDoc<'a> {
    status: &'static str,
    subcommand: &'a str,
    kind: &'a str,
    message: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Run {
    pub config: RunConfig,
    pub subcommand: &'static str,
    inputs: Vec<InputRecord>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(config: RunConfig, subcommand: &'static str) -> Self {
        Self {
            config,
            subcommand,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out
    }

    /// Hashes an input file and returns its path for loading.
    pub fn input<'p>(&mut self, role: &str, path: &'p Path) -> Result<&'p Path> {
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.push(InputRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(path)
    }

    /// Output path inside the run directory, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(PathBuf::from(name));
        self.config.out.join(name)
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.output(name);
        std::fs::write(&path, text).map_err(|source| Error::File { path, source })
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &text)
    }

    /// Digest over the resolved config and every input's role and hash.
    /// Where the outputs go and how many threads ran do not change results.
    fn inputs_hash(&self) -> Result<String> {
        let mut config = self.config.clone();
        config.out = PathBuf::new();
        config.workers = 0;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&config)?);
        for i in &self.inputs {
            h.update(i.role.as_bytes());
            h.update([0]);
            h.update(i.sha256.as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn finish(&self, status: &str) -> Result<()> {
        let manifest = Manifest {
            tool: "stripelight",
            tool_version: env!("CARGO_PKG_VERSION"),
            core_version: stripelight::VERSION,
            subcommand: self.subcommand,
            status,
            seed: self.config.seed,
            inputs_hash: self.inputs_hash()?,
            inputs: &self.inputs,
            outputs: &self.outputs,
            config: &self.config,
        };
        let path = self.config.out.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| Error::File { path, source })
    }
}

/// Writes `error.json` into `dir`, creating it if needed. Best effort.
pub fn write_error(dir: &Path, subcommand: &str, err: &Error) {
    let doc = ErrorDoc {
        status: "error",
        subcommand,
        kind: err.kind(),
        message: err.to_string(),
    };
    if std::fs::create_dir_all(dir).is_ok() {
        if let Ok(text) = serde_json::to_string_pretty(&doc) {
            let _ = std::fs::write(dir.join("error.json"), text);
        }
    }
}
