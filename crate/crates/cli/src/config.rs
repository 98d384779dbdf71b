use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sda_core::eeg_io::Split;
use sda_core::metrics::Averaging;
use sda_core::net::Architecture;
use sda_core::synth::SynthConfig;
use sda_core::train::{GaGroup, TrainConfig, DEFAULT_DECAY_SPAN_WEEKS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    Standard,
    Tiny,
}

impl ArchChoice {
    pub fn architecture(self) -> Architecture {
        match self {
            ArchChoice::Standard => Architecture::STANDARD,
            ArchChoice::Tiny => Architecture::TINY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TrainMode {
    /// One network; validation on the manifest's val split.
    Base,
    /// Three networks from scratch on the train split.
    Ensemble,
    /// GA-specific fine-tuning of a pretrained ensemble.
    GaTransfer,
    /// GA-specific ensemble from random initialisation.
    GaScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    /// Threshold for the confusion counts and event matching in the report.
    pub threshold: f64,
    pub smooth_width: usize,
    /// In `fuse`, smooth the fused trace instead of each input trace.
    pub smooth_after_fusion: bool,
    pub loo: bool,
    pub operating_point_fdh: Option<f64>,
    /// Detection curve thresholds are `0, 1/n, ..., 1`.
    pub detection_grid: usize,
    pub averaging: Averaging,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            split: Split::Test,
            threshold: 0.5,
            smooth_width: 1,
            smooth_after_fusion: false,
            loo: false,
            operating_point_fdh: None,
            detection_grid: 100,
            averaging: Averaging::Pooled,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub first: Option<PathBuf>,
    pub second: Option<PathBuf>,
}

/// Everything a command reads besides its inputs. Paths do not enter the
/// config hash, so a relocated rerun reports the same hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: ArchChoice,
    pub mode: TrainMode,
    pub stride_s: u32,
    pub label_overlap: f64,
    pub val_per_member: usize,
    pub group: Option<GaGroup>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalSettings,
    pub fusion_grid_step: f64,
    pub paths: PathSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            architecture: ArchChoice::Standard,
            mode: TrainMode::Ensemble,
            stride_s: 4,
            label_overlap: sda_core::dsp::DEFAULT_LABEL_OVERLAP,
            val_per_member: 3,
            group: None,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalSettings::default(),
            fusion_grid_step: 0.05,
            paths: PathSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(sda_core::SdaError::from)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.stride_s == 0 {
            bail!(sda_core::SdaError::Config("stride_s must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_overlap) {
            bail!(sda_core::SdaError::Config(format!("label_overlap {} outside [0, 1]", self.label_overlap)));
        }
        if self.val_per_member == 0 {
            bail!(sda_core::SdaError::Config("val_per_member must be at least 1".into()));
        }
        if let Some(g) = &self.group {
            GaGroup::new(g.group_id, g.decay_span_weeks)?;
        }
        if self.eval.smooth_width % 2 == 0 {
            bail!(sda_core::SdaError::Config(format!("smooth_width {} must be odd", self.eval.smooth_width)));
        }
        if self.eval.detection_grid == 0 {
            bail!(sda_core::SdaError::Config("detection_grid must be at least 1".into()));
        }
        Ok(())
    }

    pub fn set_group(&mut self, id: u8) -> Result<()> {
        let span = self.group.map_or(DEFAULT_DECAY_SPAN_WEEKS, |g| g.decay_span_weeks);
        self.group = Some(GaGroup::new(id, span)?);
        Ok(())
    }

    /// Hex sha256 of the canonical JSON of everything except `paths`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathSettings::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p.clone()),
        None => bail!(sda_core::SdaError::Config(format!("missing path: {what}"))),
    }
}
