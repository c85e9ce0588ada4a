//! TOML run configuration. Every key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spqi::embeddings::SkipGramConfig;
use spqi::synth::SynthConfig;
use spqi::training::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Calibrate the prior-purchase weight to this correlation before
    /// generating. Unset generates with the configured weights.
    pub target_r: Option<f64>,
    /// Seed of the hashed text encoder.
    pub text_seed: u64,
    /// Seeds for `grid`; at least 5 are needed for significance tests.
    pub grid_seeds: Vec<u64>,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Output directory (file for `pretrain`).
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub skipgram: SkipGramConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target_r: None,
            text_seed: 1,
            grid_seeds: vec![1, 2, 3, 4, 5],
            data: None,
            out: None,
            synth: SynthConfig::default(),
            skipgram: SkipGramConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const ECHO_FILE: &str = "config.toml";

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.message().to_string(),
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config {
                    path: p.to_path_buf(),
                    msg: e.to_string(),
                })?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(path, e))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no dataset directory: pass --data or set `data`".into()))
    }

    pub fn out_path(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output path: pass --out or set `out`".into()))
    }
}
