//! Datasets, class pools and complementary-set batches.

mod batch;
mod idx;
mod pool;
mod split;
mod synth;

pub use batch::{ComplementarySets, LabelledBatch, UnlabelledBatch};
pub use idx::{
    load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxError,
};
pub use pool::{sample_complementary, ClassPool};
pub use split::{make_semi_split, Standardizer};
pub use synth::{synth_generate, Glyph, SyntheticSpec};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledExample {
    pub id: u64,
    pub label: usize,
    /// `[C×H×W]`
    pub image: Tensor,
}

/// Disjoint example collections of one run. Unlabelled examples keep their
/// true label for evaluation only; training never reads it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train_labelled: Vec<LabelledExample>,
    pub train_unlabelled: Vec<LabelledExample>,
    pub validation: Vec<LabelledExample>,
    pub test: Vec<LabelledExample>,
}

/// Stacks images into a `[N×C×H×W]` batch.
pub fn stack_images<'a>(examples: impl IntoIterator<Item = &'a LabelledExample>) -> Option<Tensor> {
    let images: Vec<&Tensor> = examples.into_iter().map(|e| &e.image).collect();
    if images.is_empty() {
        return None;
    }
    Some(Tensor::stack(&images).expect("dataset images share one shape"))
}
