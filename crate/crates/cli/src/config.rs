//! Experiment configuration file.

use std::path::{Path, PathBuf};

use cocoon::active::ClusterSelection;
use cocoon::hashing::config_hash;
use cocoon::metrics::QbeConfig;
use cocoon::models::{EncoderConfig, ModelConfig};
use cocoon::synth::WorldConfig;
use cocoon::trainer::{CurriculumConfig, StageLoss};
use cocoon::Error;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable overriding the output root.
pub const OUTPUT_ENV: &str = "COCOON_OUT";

fn default_seed() -> u64 {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}
fn default_split_seed() -> u64 {
    17
}
fn default_repeats() -> usize {
    5
}
fn default_clip_frames() -> usize {
    10
}
fn default_budgets() -> Vec<usize> {
    vec![16]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default = "default_split_seed")]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: default_fractions(),
            seed: default_split_seed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub qbe: QbeConfig,
    /// Independent QbE draws averaged into one score.
    #[serde(default = "default_repeats")]
    pub qbe_repeats: usize,
    /// Longest clip, in frames, for clip-level classifier scoring.
    #[serde(default = "default_clip_frames")]
    pub clip_frames: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            qbe: QbeConfig::default(),
            qbe_repeats: default_repeats(),
            clip_frames: default_clip_frames(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub selection: ClusterSelection,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            budgets: default_budgets(),
            selection: ClusterSelection::default(),
            seed: 0,
        }
    }
}

/// One experiment: world, model, curriculum, evaluation and annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub annotation: AnnotationConfig,
}

#[derive(Serialize)]
struct HashedParts<'a> {
    seed: u64,
    world: &'a WorldConfig,
    split: &'a SplitConfig,
    model: &'a ModelConfig,
    curriculum: &'a CurriculumConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(Error::Io(e)))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Core(Error::Config(detail)) => CliError::ConfigFile {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.world.validate()?;
        self.model.validate()?;
        self.curriculum.validate()?;
        if self.model.audio.input_dim != self.world.audio_dim {
            return Err(Error::Config(format!(
                "model.audio.input_dim {} differs from world.audio_dim {}",
                self.model.audio.input_dim, self.world.audio_dim
            )));
        }
        if self.model.image.input_dim != self.world.image_dim {
            return Err(Error::Config(format!(
                "model.image.input_dim {} differs from world.image_dim {}",
                self.model.image.input_dim, self.world.image_dim
            )));
        }
        if self.model.classes != self.world.classes {
            return Err(Error::Config(format!(
                "model.classes {} differs from world.classes {}",
                self.model.classes, self.world.classes
            )));
        }
        if self.eval.qbe.positives < 2 || self.eval.qbe.negatives < 1 || self.eval.qbe_repeats == 0 {
            return Err(Error::Config(
                "eval.qbe needs >= 2 positives, >= 1 negative and >= 1 repeat".into(),
            ));
        }
        if self.eval.clip_frames == 0 {
            return Err(Error::Config("eval.clip_frames must be >= 1".into()));
        }
        if self.annotation.budgets.contains(&0) {
            return Err(Error::Config("annotation budgets must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash over everything that determines trained parameters.
    pub fn hash(&self) -> String {
        config_hash(&HashedParts {
            seed: self.seed,
            world: &self.world,
            split: &self.split,
            model: &self.model,
            curriculum: &self.curriculum,
        })
    }

    /// Output root, honoring the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// The eight-class, twenty-thousand-frame world with a scaled-down model.
    pub fn standard(seed: u64) -> Self {
        let world = WorldConfig {
            classes: 8,
            sequences: 200,
            frames_per_sequence: 100,
            audio_dim: 256,
            image_dim: 192,
            class_dwell_mean: 25.0,
            noise_std: 3.5,
            nuisance_std: 0.5,
            class_prior_exponent: 0.0,
            background_prior: 0.0,
            seed,
        };
        let model = ModelConfig {
            audio: EncoderConfig {
                input_dim: world.audio_dim,
                hidden: vec![64],
                embed_dim: 16,
            },
            image: EncoderConfig {
                input_dim: world.image_dim,
                hidden: vec![64],
                embed_dim: 16,
            },
            coincidence_hidden: 64,
            clusters: 64,
            logit_scale: 60.0,
            classes: world.classes,
            classifier_hidden: 32,
        };
        let mut curriculum = CurriculumConfig::standard([400, 400, 1200, 300]);
        for s in &mut curriculum.stages {
            s.patience = 0;
            if s.loss == StageLoss::Class {
                s.learning_rate = 3e-3;
            }
        }
        ExperimentConfig {
            seed,
            output_dir: default_output(),
            world,
            split: SplitConfig::default(),
            model,
            curriculum,
            eval: EvalConfig::default(),
            annotation: AnnotationConfig {
                budgets: vec![16],
                ..AnnotationConfig::default()
            },
        }
    }
}
