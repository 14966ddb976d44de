//! Self-describing JSON snapshots of a training run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::TrainConfig;
use crate::cotrain::{SgdNesterov, TrainState};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiHeadModel, NamedTensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub normalization: ChannelStats,
    pub iteration: u64,
    pub model: Vec<NamedTensor>,
    pub ema: Vec<NamedTensor>,
    pub momentum_buffers: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, state: &TrainState, normalization: &ChannelStats) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            model_config: state.model.config.clone(),
            normalization: normalization.clone(),
            iteration: state.iteration,
            model: state.model.named_tensors(),
            ema: state.ema.named_tensors(),
            momentum_buffers: state.optimizer.buffers.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, rejecting any other format version before decoding the rest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(Value::as_u64) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Incompatible(format!(
                    "checkpoint format version {v}, this build reads version {CHECKPOINT_FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Incompatible("checkpoint has no format_version".into())),
        }
        let ckpt: Self =
            serde_json::from_value(value).map_err(|e| Error::Incompatible(format!("malformed checkpoint: {e}")))?;
        if ckpt.config.model_config()? != ckpt.model_config {
            return Err(Error::Incompatible(
                "stored model configuration does not match the stored run configuration".into(),
            ));
        }
        Ok(ckpt)
    }

    fn build(&self, tensors: &[NamedTensor]) -> Result<MultiHeadModel> {
        let mut model = MultiHeadModel::build(&self.model_config, self.config.seed)?;
        model
            .load_named_tensors(tensors)
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        Ok(model)
    }

    pub fn trainer_model(&self) -> Result<MultiHeadModel> {
        self.build(&self.model)
    }

    pub fn ema_model(&self) -> Result<MultiHeadModel> {
        self.build(&self.ema)
    }

    /// Rebuilds models and optimizer buffers. The augmentation stream restarts
    /// from the configured seed.
    pub fn restore(&self) -> Result<TrainState> {
        let mut state = TrainState::new(&self.config)?;
        state.model = self.trainer_model()?;
        state.ema = self.ema_model()?;
        if state.optimizer.buffers.len() != self.momentum_buffers.len()
            || state
                .optimizer
                .buffers
                .iter()
                .zip(&self.momentum_buffers)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Incompatible("optimizer buffers do not match the model".into()));
        }
        state.optimizer = SgdNesterov {
            buffers: self.momentum_buffers.clone(),
            ..state.optimizer
        };
        state.iteration = self.iteration;
        Ok(state)
    }
}
