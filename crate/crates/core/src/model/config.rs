use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::nn::{BackboneConfig, ImageShape};

/// Pixel likelihood of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Independent Bernoulli pixels in [0, 1].
    #[default]
    Bernoulli,
    /// Independent Gaussian pixels with one learned global log-variance.
    Gaussian,
}

fn default_latent() -> usize {
    16
}

fn default_decoder_units() -> [usize; 2] {
    [64, 128]
}

fn default_classifier_units() -> [usize; 2] {
    [128, 64]
}

fn default_dropout() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub num_classes: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_latent")]
    pub latent_r: usize,
    #[serde(default = "default_latent")]
    pub latent_v: usize,
    /// Width of the dense layer after each backbone. Default 128, or 64
    /// when both latents have at most 8 dimensions.
    #[serde(default)]
    pub embed_units: Option<usize>,
    /// Width of the dense layers feeding the latent heads. Default 64, or 32
    /// for latents of at most 8 dimensions.
    #[serde(default)]
    pub hidden_units: Option<usize>,
    /// Per-latent layer width, then joint layer width.
    #[serde(default = "default_decoder_units")]
    pub decoder_units: [usize; 2],
    /// Hidden widths of the label-posterior and classifier heads.
    #[serde(default = "default_classifier_units")]
    pub classifier_units: [usize; 2],
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub likelihood: Likelihood,
    /// Builds the q(y|x) network. Required for semi-supervised training and
    /// for the classifier term.
    #[serde(default)]
    pub label_posterior: bool,
}

impl ModelConfig {
    /// Default architecture for the given image geometry and class count.
    pub fn new(image: ImageShape, num_classes: usize) -> Self {
        Self {
            image,
            num_classes,
            backbone: BackboneConfig::default(),
            latent_r: default_latent(),
            latent_v: default_latent(),
            embed_units: None,
            hidden_units: None,
            decoder_units: default_decoder_units(),
            classifier_units: default_classifier_units(),
            dropout: default_dropout(),
            likelihood: Likelihood::default(),
            label_posterior: false,
        }
    }

    fn small_latents(&self) -> bool {
        self.latent_r.max(self.latent_v) <= 8
    }

    pub fn embed_width(&self) -> usize {
        self.embed_units
            .unwrap_or(if self.small_latents() { 64 } else { 128 })
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_units
            .unwrap_or(if self.small_latents() { 32 } else { 64 })
    }

    /// Copy with every optional width filled in.
    pub fn resolved(&self) -> Self {
        Self {
            embed_units: Some(self.embed_width()),
            hidden_units: Some(self.hidden_width()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let img = self.image;
        if img.channels == 0 || img.height == 0 || img.width == 0 {
            return Err(config("image extents must be positive"));
        }
        if self.num_classes == 0 {
            return Err(config("num_classes must be at least 1"));
        }
        if self.latent_r == 0 {
            return Err(config("latent_r must be at least 1"));
        }
        if self.latent_v == 0 {
            return Err(config("latent_v must be at least 1"));
        }
        let widths = [
            self.embed_width(),
            self.hidden_width(),
            self.decoder_units[0],
            self.decoder_units[1],
            self.classifier_units[0],
            self.classifier_units[1],
        ];
        if widths.contains(&0) {
            return Err(config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        self.backbone.validate()
    }
}
