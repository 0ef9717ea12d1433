//! Run configuration: one JSON document shared by every subcommand.
//!
//! Unknown keys are rejected at every level. Static checks run in
//! [`RunConfig::validate`]; checks that need the image geometry run once
//! the dataset is known.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use equivae::data::SyntheticSpec;
use equivae::eval::{DEFAULT_EVAL_M, DEFAULT_GRID_RANGE};
use equivae::model::ModelConfig;
use equivae::nn::ImageShape;
use equivae::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Procedural glyphs. `seed` must be 0 or equal to the run seed; the run
    /// seed is written back on resolution.
    Synthetic(SyntheticSpec),
    Idx(IdxDataset),
}

fn default_idx_classes() -> usize {
    10
}

/// IDX image/label file pairs, optionally gzipped. Relative paths resolve
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDataset {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_idx_classes")]
    pub num_classes: usize,
    /// Keeps only the first `n` training examples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Moves the last `n` training examples to a validation split.
    #[serde(default)]
    pub validation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeConfig {
    #[default]
    Supervised,
    /// Keeps a stratified `n_labelled` subset of the training data labelled.
    Semi { n_labelled: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Probe {
    PriorSamples,
    Interpolate,
    StyleGrid,
    LatentGrid,
}

impl Probe {
    pub const ALL: [Probe; 4] = [
        Probe::PriorSamples,
        Probe::Interpolate,
        Probe::StyleGrid,
        Probe::LatentGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Probe::PriorSamples => "prior-samples",
            Probe::Interpolate => "interpolate",
            Probe::StyleGrid => "style-grid",
            Probe::LatentGrid => "latent-grid",
        }
    }
}

impl std::str::FromStr for Probe {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Probe::ALL.iter().map(|p| p.name()).collect();
                anyhow::anyhow!("unknown probe '{s}'; valid probes: {}", valid.join(", "))
            })
    }
}

fn default_m() -> usize {
    DEFAULT_EVAL_M
}
fn default_prior_samples() -> usize {
    8
}
fn default_steps() -> usize {
    8
}
fn default_resolution() -> usize {
    9
}
fn default_range() -> f64 {
    DEFAULT_GRID_RANGE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Set size used for the per-class invariant means.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Probes run by `generate` when no `--probe` is given.
    #[serde(default)]
    pub probes: Vec<Probe>,
    /// Samples per class for `prior-samples`.
    #[serde(default = "default_prior_samples")]
    pub prior_samples: usize,
    /// Frames for `interpolate`, endpoints included.
    #[serde(default = "default_steps")]
    pub interpolation_steps: usize,
    /// Cells per axis for `latent-grid`.
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    #[serde(default = "default_range")]
    pub grid_range: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            probes: Vec::new(),
            prior_samples: default_prior_samples(),
            interpolation_steps: default_steps(),
            grid_resolution: default_resolution(),
            grid_range: default_range(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Architecture keys of the model. `image` and `num_classes` may be
    /// omitted; they are taken from the dataset.
    #[serde(default)]
    pub model: Map<String, Value>,
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("config does not match the run schema")
    }

    /// Reads a config file and anchors relative dataset paths at its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config =
            Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetConfig::Idx(idx) = &mut config.dataset {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).context("config does not match the run schema")
    }

    /// Replaces the run seed, and the synthetic dataset seed with it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let DatasetConfig::Synthetic(spec) = &mut self.dataset {
            spec.seed = seed;
        }
    }

    /// Image geometry and class count, when known without reading data.
    pub fn shape_hint(&self) -> Option<(ImageShape, usize)> {
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => Some((
                ImageShape {
                    channels: 1,
                    height: spec.height,
                    width: spec.width,
                },
                spec.num_classes,
            )),
            DatasetConfig::Idx(_) => None,
        }
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => {
                spec.validate()?;
                ensure!(
                    spec.seed == 0 || spec.seed == self.seed,
                    "dataset.seed ({}) must be 0 or equal to the run seed ({})",
                    spec.seed,
                    self.seed
                );
            }
            DatasetConfig::Idx(idx) => {
                ensure!(
                    idx.num_classes >= 1,
                    "dataset.num_classes must be at least 1"
                );
                ensure!(
                    idx.train_limit != Some(0) && idx.test_limit != Some(0),
                    "dataset limits must be positive"
                );
            }
        }
        self.training.validate()?;
        let e = &self.evaluation;
        ensure!(e.m >= 1, "evaluation.m must be at least 1");
        ensure!(
            e.prior_samples >= 1,
            "evaluation.prior_samples must be at least 1"
        );
        ensure!(
            e.interpolation_steps >= 2,
            "evaluation.interpolation_steps must be at least 2"
        );
        ensure!(
            e.grid_resolution >= 1,
            "evaluation.grid_resolution must be at least 1"
        );
        ensure!(
            e.grid_range.is_finite() && e.grid_range > 0.0,
            "evaluation.grid_range must be positive"
        );
        if let ModeConfig::Semi { n_labelled } = self.mode {
            ensure!(n_labelled >= 2, "mode.n_labelled must be at least 2");
        }
        ensure!(
            !self.output_dir.as_os_str().is_empty(),
            "output_dir must not be empty"
        );
        if let Some((image, classes)) = self.shape_hint() {
            self.model_config(image, classes)?;
        }
        Ok(())
    }

    /// Full model configuration for the given data geometry, validated and
    /// with every optional width filled in.
    pub fn model_config(&self, image: ImageShape, num_classes: usize) -> Result<ModelConfig> {
        let mut map = self.model.clone();
        for (key, derived) in [
            ("image", serde_json::to_value(image)?),
            ("num_classes", Value::from(num_classes)),
        ] {
            match map.get(key) {
                Some(given) if *given != derived => {
                    bail!("model.{key} = {given} does not match the dataset ({derived})")
                }
                Some(_) => {}
                None => {
                    map.insert(key.into(), derived);
                }
            }
        }
        let config: ModelConfig = serde_json::from_value(Value::Object(map))
            .context("model section does not match the schema")?;
        config.validate()?;
        if matches!(self.mode, ModeConfig::Semi { .. }) || self.training.classifier_term {
            ensure!(
                config.label_posterior,
                "semi-supervised mode and the classifier term need model.label_posterior = true"
            );
        }
        Ok(config.resolved())
    }

    /// Copy with defaults written out, ready to reproduce the run alone.
    pub fn resolved(&self, model: &ModelConfig) -> Result<Self> {
        let mut out = self.clone();
        out.set_seed(self.seed);
        out.model = match serde_json::to_value(model)? {
            Value::Object(map) => map,
            _ => unreachable!("model config serialises to an object"),
        };
        out.training.milestones = Some(self.training.milestones());
        if let DatasetConfig::Idx(idx) = &mut out.dataset {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                if let Ok(abs) = std::path::absolute(&*p) {
                    *p = abs;
                }
            }
        }
        Ok(out)
    }
}
