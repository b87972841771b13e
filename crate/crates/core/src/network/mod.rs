//! Transcription network: a U-net over the (time × frequency) spectrogram,
//! a bidirectional LSTM over time and a per-frame linear classifier, with
//! hand-written reverse-mode gradients and a binary checkpoint format.

mod checkpoint;
mod layers;
mod model;
mod tensor;

pub use checkpoint::{load_checkpoint, peek_checkpoint_dtype, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{backward, forward, forward_trace, gradient, init_params, param_shapes, Batch, ForwardTrace, GradientResult};
pub use tensor::{DType, Matrix, ParameterSet, Scalar, Tensor};

use serde::{Deserialize, Serialize};

use crate::error::{AmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_bins: usize,
    pub unet_levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub rnn_hidden: usize,
    pub output_pitches: usize,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_bins: 88,
            unet_levels: 3,
            base_channels: 8,
            kernel_size: 3,
            rnn_hidden: 64,
            output_pitches: 88,
            dtype: DType::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_bins", self.input_bins),
            ("base_channels", self.base_channels),
            ("kernel_size", self.kernel_size),
            ("rnn_hidden", self.rnn_hidden),
            ("output_pitches", self.output_pitches),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(AmtError::Config(format!("{name} must be at least 1")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(AmtError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.unet_levels > 8 {
            return Err(AmtError::Config(format!("unet_levels {} is too deep", self.unet_levels)));
        }
        Ok(())
    }

    /// Multiple that time and frequency are padded to inside the U-net.
    pub fn pad_multiple(&self) -> usize {
        1 << self.unet_levels
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}
