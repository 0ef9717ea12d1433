use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Dense};
use super::store::{ParamGroup, ParameterStore};
use crate::error::{config, contract, Result};
use crate::rng::Rng;
use crate::tensor::{conv_output_size, Tape, Var};

pub const DEFAULT_FILTERS: [usize; 5] = [8, 16, 32, 64, 64];
const CONV_STRIDES: [usize; 5] = [1, 2, 2, 2, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

fn default_filters() -> Vec<usize> {
    DEFAULT_FILTERS.to_vec()
}

fn default_kernel() -> usize {
    5
}

/// Feature extractor run before the dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Dense ReLU layers over the flattened image.
    Mlp { hidden: Vec<usize> },
    /// Five same-padded conv layers, strides (1, 2, 2, 2, 2).
    Conv {
        #[serde(default = "default_filters")]
        filters: Vec<usize>,
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::Mlp {
            hidden: vec![256, 128],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(config(
                        "mlp backbone needs a non-empty list of positive widths",
                    ));
                }
            }
            Self::Conv { filters, kernel } => {
                if filters.len() != CONV_STRIDES.len() || filters.contains(&0) {
                    return Err(config(
                        "conv backbone needs exactly five positive filter counts",
                    ));
                }
                if kernel % 2 == 0 {
                    return Err(config(format!("conv kernel must be odd, got {kernel}")));
                }
            }
        }
        Ok(())
    }

    /// Spatial extents after each conv layer, starting with the input.
    pub fn conv_extents(image: ImageShape, kernel: usize) -> Vec<(usize, usize)> {
        let mut sizes = vec![(image.height, image.width)];
        for &s in &CONV_STRIDES {
            let (h, w) = *sizes.last().unwrap();
            sizes.push((
                conv_output_size(h, kernel, s),
                conv_output_size(w, kernel, s),
            ));
        }
        sizes
    }

    pub fn strides() -> [usize; 5] {
        CONV_STRIDES
    }
}

#[derive(Debug, Clone)]
enum Stack {
    Mlp(Vec<Dense>),
    Conv(Vec<Conv2d>),
}

/// Backbone followed by one dense ReLU layer: `[B×C×H×W] → [B×units]`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stack: Stack,
    head: Dense,
    image: ImageShape,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        group: ParamGroup,
        backbone: &BackboneConfig,
        image: ImageShape,
        units: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        backbone.validate()?;
        let (stack, flat) = match backbone {
            BackboneConfig::Mlp { hidden } => {
                let mut layers = Vec::new();
                let mut width = image.pixels();
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(Dense::new(
                        store,
                        &format!("{name}.mlp{i}"),
                        group,
                        width,
                        h,
                        rng,
                    )?);
                    width = h;
                }
                (Stack::Mlp(layers), width)
            }
            BackboneConfig::Conv { filters, kernel } => {
                let mut layers = Vec::new();
                let mut channels = image.channels;
                for (i, (&f, &s)) in filters.iter().zip(&CONV_STRIDES).enumerate() {
                    layers.push(Conv2d::new(
                        store,
                        &format!("{name}.conv{i}"),
                        group,
                        channels,
                        f,
                        *kernel,
                        s,
                        rng,
                    )?);
                    channels = f;
                }
                let (h, w) = *BackboneConfig::conv_extents(image, *kernel).last().unwrap();
                (Stack::Conv(layers), channels * h * w)
            }
        };
        let head = Dense::new(store, &format!("{name}.head"), group, flat, units, rng)?;
        Ok(Self { stack, head, image })
    }

    pub fn units(&self) -> usize {
        self.head.outputs
    }

    pub fn forward<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != self.image.dims() {
            return Err(contract(format!(
                "image encoder expects [B, {}, {}, {}], got {shape:?}",
                self.image.channels, self.image.height, self.image.width
            )));
        }
        let mut h = x;
        match &self.stack {
            Stack::Mlp(layers) => {
                h = h.flatten()?;
                for layer in layers {
                    h = layer.forward(store, tape, h)?.relu();
                }
            }
            Stack::Conv(layers) => {
                for layer in layers {
                    h = layer.forward(store, tape, h)?.relu();
                }
                h = h.flatten()?;
            }
        }
        Ok(self.head.forward(store, tape, h)?.relu())
    }
}
