//! Parameter storage, layers and image backbones.

mod backbone;
mod layers;
mod store;

pub use backbone::{BackboneConfig, ImageEncoder, ImageShape, DEFAULT_FILTERS};
pub use layers::{dropout, glorot_uniform, Conv2d, ConvTranspose2d, Dense, MlpHead};
pub use store::{ParamGroup, ParamId, ParameterStore};
