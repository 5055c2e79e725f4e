use std::path::Path;

use anyhow::{bail, Context, Result};
use panpose::eval::SigmaConfig;
use panpose::heatmap::EncodeParams;
use panpose::training::TrainConfig;
use serde::Deserialize;

/// The optional `--config` file. Every table is optional and command-line
/// flags override whatever it sets.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Starting point for `[train]`; one of the training preset names.
    pub preset: Option<String>,
    pub train: Option<toml::Table>,
    pub encode: Option<EncodeParams>,
    pub decode: Option<DecodeSection>,
    /// Same keys as a sigma file: `sigma = ...` or `sigmas = [...]`.
    pub eval: Option<toml::Table>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub threshold: Option<f64>,
    pub tag_threshold: Option<f64>,
    pub max_individuals: Option<usize>,
}

/// Marks a problem with how the tool was invoked (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| panpose::Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    /// Training hyperparameters: preset (flag, then file, then `toy`), then the
    /// file's `[train]` keys on top.
    pub fn train_config(&self, preset_flag: Option<&str>) -> Result<TrainConfig> {
        let name = preset_flag.or(self.preset.as_deref()).unwrap_or("toy");
        let Some(base) = TrainConfig::preset(name) else {
            bail!(usage(format!(
                "unknown preset `{name}` (known: {})",
                panpose::training::PRESET_NAMES.join(", ")
            )));
        };
        let Some(overrides) = &self.train else {
            return Ok(base);
        };
        let mut merged = toml::Table::try_from(&base).context("serializing preset")?;
        for (k, v) in overrides {
            merged.insert(k.clone(), v.clone());
        }
        merged
            .try_into()
            .map_err(|e| usage(format!("[train]: {e}")))
    }

    pub fn encode_params(&self) -> EncodeParams {
        self.encode.unwrap_or_default()
    }

    pub fn decode(&self) -> &DecodeSection {
        static EMPTY: DecodeSection = DecodeSection {
            threshold: None,
            tag_threshold: None,
            max_individuals: None,
        };
        self.decode.as_ref().unwrap_or(&EMPTY)
    }
}

/// Resolves per-keypoint sigmas: `--sigma` wins over `--sigma-config`, which
/// wins over the config file's `[eval]`; the default is the COCO mean.
pub fn sigmas(flag: Option<&str>, file: Option<&Path>, config: &FileConfig, m: usize) -> Result<SigmaConfig> {
    if let Some(flag) = flag {
        return Ok(match flag {
            "coco-mean" => SigmaConfig::coco_mean(m),
            "lab-mouse" => SigmaConfig::lab_mouse(m),
            other => {
                let value: f64 = other
                    .parse()
                    .map_err(|_| usage(format!("--sigma expects a number, coco-mean or lab-mouse, got `{other}`")))?;
                SigmaConfig::broadcast(value, m)?
            }
        });
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| panpose::Error::io(path, e))?;
        return Ok(SigmaConfig::from_toml(&text, m)?);
    }
    if let Some(table) = &config.eval {
        return Ok(SigmaConfig::from_toml(&table.to_string(), m)?);
    }
    Ok(SigmaConfig::coco_mean(m))
}
