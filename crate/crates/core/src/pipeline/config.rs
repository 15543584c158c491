use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atmospherics::DEFAULT_T_MIN;
use crate::error::{Error, Result};
use crate::networks::{NetworkConfig, TrainSchedule};
use crate::synthesis::{PairSource, SynthesisConfig};

/// Checkpoint locations. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub deglow: PathBuf,
    pub dehaze: PathBuf,
}

impl Default for ModelPaths {
    fn default() -> Self {
        Self::in_dir(Path::new("checkpoints"))
    }
}

impl ModelPaths {
    /// `deglow.nckp` and `dehaze.nckp` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            deglow: dir.join("deglow.nckp"),
            dehaze: dir.join("dehaze.nckp"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Recurrences at inference; the checkpoint's own count when unset.
    pub tau: Option<usize>,
    pub t_min: f64,
    /// Run the networks on tiles of this size (plus a halo) to bound memory.
    pub tile_size: Option<usize>,
    pub threads: usize,
    /// Round the deglowed image and the transmission onto their 16-bit file
    /// grids inside the pipeline, so that recovery from dumped
    /// intermediates reproduces the output exactly.
    pub quantize_stages: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: None,
            t_min: DEFAULT_T_MIN,
            tile_size: None,
            threads: 1,
            quantize_stages: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!(
                "t_min must lie in (0, 1), got {}",
                self.t_min
            )));
        }
        if self.tau == Some(0) {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.tile_size == Some(0) {
            return Err(Error::Config("tile_size must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where clean/depth pairs come from for `synth` and for training without a
/// prebuilt dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub procedural_pairs: usize,
    /// `<stem>.ppm` + `<stem>.depth.pgm` pairs; overrides the procedural scenes.
    pub pairs_dir: Option<PathBuf>,
    /// Every `holdout_every`-th record is kept out of training for validation;
    /// 0 validates on the first training samples instead.
    pub holdout_every: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            procedural_pairs: 10,
            pairs_dir: None,
            holdout_every: 10,
        }
    }
}

impl DatasetConfig {
    pub fn source(&self) -> PairSource {
        match &self.pairs_dir {
            Some(dir) => PairSource::Directory(dir.clone()),
            None => PairSource::Procedural {
                count: self.procedural_pairs,
            },
        }
    }
}

/// Everything the command line needs, loaded from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// When set, replaces the synthesis and both training seeds.
    pub seed: Option<u64>,
    pub models: ModelPaths,
    pub inference: InferenceConfig,
    pub dataset: DatasetConfig,
    pub synthesis: SynthesisConfig,
    pub network: NetworkConfig,
    pub train_deglow: TrainSchedule,
    pub train_dehaze: TrainSchedule,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.apply_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synthesis.rng_seed = seed;
        self.train_deglow.seed = seed;
        self.train_dehaze.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.inference.validate()?;
        self.synthesis.validate()?;
        self.network.validate()?;
        self.train_deglow.validate()?;
        self.train_dehaze.validate()?;
        if self.dataset.pairs_dir.is_none() && self.dataset.procedural_pairs == 0 {
            return Err(Error::Config(
                "procedural_pairs must be >= 1 without a pairs_dir".into(),
            ));
        }
        Ok(())
    }
}
