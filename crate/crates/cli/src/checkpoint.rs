//! Human-readable model checkpoints.
//!
//! A checkpoint is a pretty-printed JSON document holding the architecture,
//! the flat parameter arrays, the training settings that produced it, and the
//! task it was trained on. Floats are written in shortest round-trip form and
//! parsed exactly, so save, load, save reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use solman::lsmo::{ManifoldModel, TrainConfig};
use solman::planning::{CostConfig, PriorConfig, World2D};
use solman::tinynet::{param_count, DenseNet};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

/// What the model was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    Toy { function: u32 },
    Planning { world: World2D, prior: PriorConfig, cost: CostConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub latent_dim: usize,
    pub dec_var: f64,
    pub seed: u64,
    pub task: Task,
    pub train_config: TrainConfig,
    pub encoder_sizes: Vec<usize>,
    pub decoder_sizes: Vec<usize>,
    /// Per layer: weights in row-major order, then biases.
    pub encoder_params: Vec<f64>,
    pub decoder_params: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &ManifoldModel, task: Task, train_config: &TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            latent_dim: model.latent_dim(),
            dec_var: model.dec_var(),
            seed: train_config.seed,
            task,
            train_config: train_config.clone(),
            encoder_sizes: model.encoder().layer_sizes(),
            decoder_sizes: model.decoder().layer_sizes(),
            encoder_params: model.encoder().to_flat(),
            decoder_params: model.decoder().to_flat(),
        }
    }

    fn check_shapes(&self) -> Result<(), String> {
        for (field, sizes, params) in [
            ("encoder_params", &self.encoder_sizes, &self.encoder_params),
            ("decoder_params", &self.decoder_sizes, &self.decoder_params),
        ] {
            if sizes.len() < 2 {
                return Err(format!("{field}: architecture needs at least two layer sizes"));
            }
            let expected = param_count(sizes);
            if params.len() != expected {
                return Err(format!("{field}: {} values, architecture needs {expected}", params.len()));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> CliResult<ManifoldModel> {
        self.check_shapes().map_err(CliError::Config)?;
        let enc = DenseNet::from_flat(&self.encoder_sizes, &self.encoder_params)?;
        let dec = DenseNet::from_flat(&self.decoder_sizes, &self.decoder_params)?;
        Ok(ManifoldModel::from_parts(enc, dec, self.latent_dim, self.dec_var)?)
    }

    pub fn to_json(&self) -> CliResult<String> {
        let finite = self.encoder_params.iter().chain(&self.decoder_params).all(|v| v.is_finite());
        if !finite {
            return Err(CliError::Numeric("model has non-finite parameters".into()));
        }
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Numeric(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("corrupt file: {e}"))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(format!("format_version: found {v}, expected {CHECKPOINT_VERSION}")),
            None => return Err("format_version: missing".into()),
        }
        let ckpt: Self = serde_json::from_value(value).map_err(|e| format!("corrupt file: {e}"))?;
        ckpt.check_shapes()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> CliResult<()> {
    std::fs::write(path, ckpt.to_json()?).map_err(|e| CliError::io(path, e))
}

/// Reads and validates a checkpoint. Errors name the path and the field.
pub fn load_checkpoint(path: &Path) -> CliResult<ModelCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    ModelCheckpoint::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> CliResult<(ManifoldModel, ModelCheckpoint)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((model, ckpt))
}
