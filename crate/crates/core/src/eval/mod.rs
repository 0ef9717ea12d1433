//! Classification from trained embeddings, generative probes and exports.
//!
//! Everything here reads a frozen model. Inference runs in fixed-size chunks
//! whose results do not depend on the chunk size.

mod cluster;
mod export;
mod grid;
mod neural;
mod probes;

pub use cluster::{
    compute_cluster_means, distance_classify, evaluate_distance_classifier, ClassificationReport,
    ClusterMeans, DEFAULT_EVAL_M,
};
pub use export::export_embeddings;
pub use grid::{write_pnm, ImageGrid};
pub use neural::{train_benchmark_classifier, train_embedding_classifier, HeadTrainConfig};
pub use probes::{
    generate_prior_samples, interpolate, latent_grid, prior_samples_from, reconstruct,
    style_transfer_grid, DEFAULT_GRID_RANGE,
};

/// Rows per forward pass during inference.
pub(crate) const CHUNK: usize = 256;
