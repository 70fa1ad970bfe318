//! `provenance.toml`: the command, its flags, the seed, input checksums and
//! the effective configuration. Thread counts are left out so artifacts do
//! not depend on them.

use std::path::Path;

use dip_core::config::RunConfig;
use dip_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Serialize)]
struct InputChecksum {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
pub struct Provenance {
    command: String,
    version: String,
    args: Vec<String>,
    seed: u64,
    inputs: Vec<InputChecksum>,
    config: RunConfig,
}

/// Command-line arguments without thread-count flags.
pub fn recorded_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip_next = false;
    for a in args {
        if skip_next {
            skip_next = false;
        } else if a == "--threads" {
            skip_next = true;
        } else if !a.starts_with("--threads=") {
            out.push(a);
        }
    }
    out
}

impl Provenance {
    pub fn new(command: &str, args: &[String], config: &RunConfig) -> Self {
        Provenance {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            args: args.to_vec(),
            seed: config.seed,
            inputs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| {
            Failure::Data(Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        self.inputs.push(InputChecksum {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(self)
    }

    pub fn write(self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join("provenance.toml");
        let text = toml::to_string(&self).expect("provenance serializes");
        std::fs::write(&path, text).map_err(|e| Failure::Data(Error::Io { path, source: e }))
    }
}
