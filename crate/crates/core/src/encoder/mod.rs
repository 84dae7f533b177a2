//! Convolutional encoders with hand-written reverse-mode gradients.
//!
//! [`SingleEncoder`] is a classifier over training instruments whose
//! penultimate activation is the instrument embedding. [`MultiEncoder`]
//! shares the trunk layout and emits `M` embeddings for a mixture.

mod adam;
mod checkpoint;
pub mod layers;
mod loss;
mod model;
pub mod network;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DspError, MelConfig};
use crate::pit::PitError;
use crate::synth::{SynthError, CLIP_SAMPLES};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    config_hash, load_multi, load_single, save_multi, save_single, CheckpointIndex, CheckpointInfo, CheckpointKind,
    TensorEntry, CHECKPOINT_FORMAT,
};
pub use layers::{Pooling, Scalar};
pub use loss::{cross_entropy_loss, softmax};
pub use model::{InputNorm, MultiEncoder, SingleEncoder, DEFAULT_SLOTS};
pub use network::{Architecture, Layer, Network, ParamSet, Tape, Tensor};
pub use train::{
    evaluate_accuracy, evaluate_pit_loss, single_training_set, train_multi, train_single, write_metrics_csv,
    EpochMetrics, LabeledInput, MixExample, MixSource, MultiTrainConfig, SingleTrainConfig,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("tape does not belong to the current parameters")]
    StaleTape,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("multi-encoder training needs a trained single encoder")]
    FrozenEncoderMissing,
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Pit(#[from] PitError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePreset {
    Small,
    Large,
}

/// Layer tables of the presets.
///
/// | preset | conv channels        | hidden |
/// |--------|----------------------|--------|
/// | small  | 16, 32, 64           | 512    |
/// | large  | 32, 64, 128, 256     | 1024   |
impl SizePreset {
    pub fn conv_channels(self) -> Vec<usize> {
        match self {
            SizePreset::Small => vec![16, 32, 64],
            SizePreset::Large => vec![32, 64, 128, 256],
        }
    }

    pub fn hidden(self) -> Vec<usize> {
        match self {
            SizePreset::Small => vec![512],
            SizePreset::Large => vec![1024],
        }
    }
}

pub const DEFAULT_EMBEDDING_DIM: usize = 1024;
pub const MIN_EMBEDDING_DIM: usize = 8;

/// Shape of the trunk shared by both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mel: MelConfig,
    pub clip_samples: usize,
    pub conv_channels: Vec<usize>,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::preset(SizePreset::Small, DEFAULT_EMBEDDING_DIM)
    }
}

impl EncoderConfig {
    pub fn preset(preset: SizePreset, embedding_dim: usize) -> Self {
        EncoderConfig {
            mel: MelConfig::default(),
            clip_samples: CLIP_SAMPLES,
            conv_channels: preset.conv_channels(),
            hidden: preset.hidden(),
            embedding_dim,
            pooling: Pooling::TimeFrequency,
        }
    }

    /// `(frames, mel bins)` of one input.
    pub fn input_shape(&self) -> (usize, usize) {
        (self.mel.frames(self.clip_samples), self.mel.mel_bins)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        self.mel.validate()?;
        if self.embedding_dim < MIN_EMBEDDING_DIM {
            return Err(EncoderError::InvalidConfig(format!(
                "embedding_dim {} is below {MIN_EMBEDDING_DIM}",
                self.embedding_dim
            )));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) || self.hidden.contains(&0) {
            return Err(EncoderError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.clip_samples < self.mel.fft_size {
            return Err(EncoderError::InvalidConfig("clip shorter than one FFT frame".into()));
        }
        let (t, f) = self.input_shape();
        let stages = self.conv_channels.len();
        if t >> stages == 0 || f >> stages == 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "{t}x{f} input does not survive {stages} pooling stages"
            )));
        }
        Ok(())
    }

    /// Trunk architecture followed by the linear layers in `tail`.
    pub(crate) fn architecture(&self, tail: &[usize]) -> Architecture {
        let mut dense = self.hidden.clone();
        dense.extend_from_slice(tail);
        Architecture {
            input: self.input_shape(),
            conv_channels: self.conv_channels.clone(),
            pooling: self.pooling,
            dense,
            linear_tail: tail.len(),
        }
    }
}
