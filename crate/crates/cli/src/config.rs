use std::path::{Path, PathBuf};

use dvae_core::dsp::SpectrogramConfig;
use dvae_core::model::ModelConfig;
use dvae_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Speaker split file (`<speaker_id> <train|test>` lines); the default split
    /// holds out the last speakers in sorted order.
    pub split: Option<PathBuf>,
    /// Normalization statistics written by `features`.
    pub stats: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub dsp: SpectrogramConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl CliConfig {
    /// Parses the file, or returns defaults when no file is given. Relative
    /// paths inside `paths` resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("--config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Validation(format!("--config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.split, &mut cfg.paths.stats].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// `model.beta` and `train.beta` name the same weight; either may be
    /// set, and a value that differs from the default wins.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let default = TrainConfig::default().beta;
        match (cfg.model.beta, cfg.train.beta) {
            (m, t) if m == t => {}
            (m, t) if t == default => cfg.train.beta = m,
            (m, t) if m == default => cfg.model.beta = t,
            (m, t) => return Err(format!("model.beta {m} conflicts with train.beta {t}")),
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |section: &str, r: dvae_core::Result<()>| r.map_err(|e| CliError::Validation(format!("config {section}: {e}")));
        v("dsp", self.dsp.validate())?;
        v("model", self.model.validate())?;
        v("train", self.train.validate())?;
        if self.model.n_mels != self.dsp.n_mels {
            return Err(CliError::Validation(format!(
                "config: model.n_mels {} differs from dsp.n_mels {}",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        Ok(())
    }
}
