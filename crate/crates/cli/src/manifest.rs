//! Run manifests: what ran, with which resolved settings, on which inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, for `replay`.
    pub argv: Vec<String>,
    /// Every setting the command used, defaults included.
    pub config: serde_json::Value,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    pub rng_seed: Option<u64>,
    pub tool_version: String,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            rng_seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, value: impl Serialize) {
        self.config = serde_json::to_value(value).expect("configs serialize");
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records a tuple file and its feature file.
    pub fn tuple_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.input(path)?;
        let features = features_path(path);
        if features.exists() {
            self.input(&features)?;
        }
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Data(guidecap::Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
        })
    }
}

pub fn features_path(tuples: &Path) -> PathBuf {
    let stem = tuples.file_stem().and_then(|s| s.to_str()).unwrap_or("tuples");
    tuples.with_file_name(format!("{stem}.features.gten"))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
