use std::fs;
use std::path::Path;

use anyhow::Context;
use instret::encoder::{EncoderConfig, MultiTrainConfig, SingleTrainConfig, DEFAULT_SLOTS};
use instret::synth::{DatasetConfig, MixConfig, Split};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run reads from the config file. Flags are applied on top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section seed when set.
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub synth: DatasetConfig,
    pub encoder: EncoderConfig,
    pub multi_encoder: MultiNet,
    pub single: SingleTrainConfig,
    pub multi: MultiTrainConfig,
    pub library: LibrarySection,
    pub eval: EvalSection,
}

/// Trunk of the multi encoder. Unset widths follow `[encoder]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiNet {
    pub slots: usize,
    pub conv_channels: Option<Vec<usize>>,
    pub hidden: Option<Vec<usize>>,
    /// Copy the single encoder's trunk and tile its embedding layer.
    pub warm_start: bool,
    pub warm_noise: f64,
}

impl Default for MultiNet {
    fn default() -> Self {
        MultiNet {
            slots: DEFAULT_SLOTS,
            conv_channels: None,
            hidden: None,
            warm_start: false,
            warm_noise: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibrarySection {
    /// Split whose single clips enroll the library; all clips when unset.
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub split: Split,
    pub chance_trials: usize,
    /// Random mixtures drawn from the split's single clips. Zero uses the
    /// manifest's multi entries instead.
    pub mixtures: usize,
    pub mix: MixConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seed: 0,
            split: Split::Valid,
            chance_trials: 20,
            mixtures: 0,
            mix: MixConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Usage)?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Seeds the sections from the global seed, if any.
    pub fn resolve(&mut self) {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.single.seed = seed;
            self.multi.seed = seed;
            self.eval.seed = seed;
        }
    }

    pub fn multi_encoder_config(&self) -> EncoderConfig {
        let mut c = self.encoder.clone();
        if let Some(ch) = &self.multi_encoder.conv_channels {
            c.conv_channels = ch.clone();
        }
        if let Some(h) = &self.multi_encoder.hidden {
            c.hidden = h.clone();
        }
        c
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
