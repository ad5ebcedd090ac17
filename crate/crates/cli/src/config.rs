use std::path::{Path, PathBuf};

use gridsr::data::SyntheticConfig;
use gridsr::grid::TimeSplit;
use gridsr::models::{Architecture, ModelConfig, SwinConfig, TilingMode};
use gridsr::normalization::NormVariant;
use gridsr::training::{SamplingMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Width preset for the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Reference,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Option<Architecture>,
    pub mode: Option<TilingMode>,
    pub preset: Preset,
    pub norm_variant: Option<NormVariant>,
    /// Replaces the preset's transformer settings.
    pub swin: Option<SwinConfig>,
}

/// Training options; unset fields keep the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_rel_improvement: Option<f64>,
    pub epsilon: Option<f64>,
    pub sampling: Option<SamplingMode>,
    pub samples_per_epoch: Option<usize>,
    pub validation_timesteps: Option<usize>,
}

/// Declarative description of a run. Every output is a function of this
/// document and the input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the seeds of the synthetic and training sections.
    pub seed: Option<u64>,
    pub variable: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub split: TimeSplit,
    pub synthetic: SyntheticConfig,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            variable: "tas".into(),
            data_dir: "data".into(),
            out_dir: "runs".into(),
            split: TimeSplit::default(),
            synthetic: SyntheticConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
        };
        TimeSplit::new(cfg.split.train, cfg.split.validation, cfg.split.test)?;
        Ok(cfg)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let mut s = self.synthetic.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture.unwrap_or(Architecture::SwinFull)
    }

    /// Tiled architectures default to patches, the rest to the full domain.
    pub fn mode(&self) -> TilingMode {
        let arch = self.architecture();
        self.model.mode.unwrap_or(if arch.is_tiled() { TilingMode::Patches } else { TilingMode::Full })
    }

    pub fn model_config(&self, lr_shape: (usize, usize), hr_shape: (usize, usize)) -> ModelConfig {
        let arch = self.architecture();
        let mut c = match self.model.preset {
            Preset::Desk => ModelConfig::desk(arch, lr_shape, hr_shape),
            Preset::Reference => ModelConfig::reference(arch, lr_shape, hr_shape),
        };
        if let Some(v) = self.model.norm_variant {
            c.norm_variant = v;
        }
        if let Some(s) = &self.model.swin {
            c.swin = s.clone();
        }
        c
    }

    /// Training configuration; the sampling scheme follows the architecture
    /// unless set explicitly.
    pub fn train_config(&self, tiled: bool) -> TrainConfig {
        let t = &self.train;
        let mut c = TrainConfig { sampling: TrainConfig::sampling_for(tiled), ..TrainConfig::default() };
        if let Some(v) = t.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = t.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = t.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = t.patience {
            c.patience = v;
        }
        if let Some(v) = t.min_rel_improvement {
            c.min_rel_improvement = v;
        }
        if let Some(v) = t.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = t.sampling {
            c.sampling = v;
        }
        c.samples_per_epoch = t.samples_per_epoch.or(c.samples_per_epoch);
        c.validation_timesteps = t.validation_timesteps.or(c.validation_timesteps);
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        c
    }
}
