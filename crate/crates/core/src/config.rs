//! The TOML run configuration shared by all commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineParams;
use crate::dataset::{random_patches, FixedPatches, SampleSource, SceneSample, ShiftedGrid, SplitSpec};
use crate::error::{Error, Result};
use crate::inference::{DEFAULT_TILE, DEFAULT_TILE_STRIDE};
use crate::synthcity::SceneSpec;
use crate::trainer::TrainConfig;

/// How training patches are drawn from the train region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// A fresh shifted grid every epoch.
    #[default]
    Grid,
    /// A fixed set of random patches, reshuffled every epoch.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub patch_size: usize,
    pub max_shift: usize,
    /// Patch count in `fixed` mode.
    pub train_patches: usize,
    /// Random validation patches drawn from the val region.
    pub val_patches: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { mode: SamplingMode::Grid, patch_size: 256, max_shift: 256, train_patches: 200, val_patches: 50, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub tile: usize,
    pub stride: usize,
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { tile: DEFAULT_TILE, stride: DEFAULT_TILE_STRIDE, batch: 4 }
    }
}

/// Split fractions used when no explicit regions are configured.
const TRAIN_BAND: f64 = 0.6;
const VAL_BAND: f64 = 0.2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSpec,
    /// Horizontal 60/20/20 bands of the extent when absent.
    pub split: Option<SplitSpec>,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub baseline: BaselineParams,
    pub inference: InferenceConfig,
}

impl Config {
    /// The segmentation decoder follows the objective set: it is dropped
    /// when seg is inactive and defaulted when seg is active.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let objectives = cfg.train.model.objectives;
        cfg.train.model = cfg.train.model.clone().with_objectives(objectives);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies one seed to every random component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.sampling.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn split_for(&self, shape: (usize, usize)) -> Result<SplitSpec> {
        let split = match self.split {
            Some(s) => s,
            None => SplitSpec::bands(shape, TRAIN_BAND, VAL_BAND)?,
        };
        split.validate(shape)?;
        Ok(split)
    }

    /// Training source and validation patches for `area`.
    pub fn training_data(&self, area: &SceneSample) -> Result<(Box<dyn SampleSource>, Vec<SceneSample>)> {
        let split = self.split_for(area.shape())?;
        let s = &self.sampling;
        let val = random_patches(area, split.val, s.patch_size, s.val_patches, s.seed.wrapping_add(1))?;
        let source: Box<dyn SampleSource> = match s.mode {
            SamplingMode::Grid => Box::new(ShiftedGrid {
                area: area.crop_region(split.train)?,
                region: crate::dataset::Region::whole((split.train.rows, split.train.cols)),
                patch: s.patch_size,
                max_shift: s.max_shift,
                seed: s.seed,
            }),
            SamplingMode::Fixed => Box::new(FixedPatches {
                samples: random_patches(area, split.train, s.patch_size, s.train_patches, s.seed)?,
                seed: s.seed.wrapping_add(2),
            }),
        };
        Ok((source, val))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        if self.sampling.patch_size == 0 || self.inference.tile == 0 || self.inference.stride == 0 {
            return Err(Error::Config("patch, tile and stride sizes must be positive".into()));
        }
        Ok(())
    }
}
