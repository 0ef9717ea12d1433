use serde::{Deserialize, Serialize};

use super::CHUNK;
use crate::data::{sample_complementary, stack_images, ClassPool, LabelledExample};
use crate::error::{contract, Result};
use crate::model::EquiVae;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Complementary set size used for cluster means unless configured otherwise.
pub const DEFAULT_EVAL_M: usize = 5;

/// Per-class mean of the invariant latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMeans {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub m: usize,
}

impl ClusterMeans {
    /// Checks shape and finiteness.
    pub fn new(means: Vec<Vec<f64>>, counts: Vec<usize>, m: usize) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        if means.is_empty() || dim == 0 || means.iter().any(|r| r.len() != dim) {
            return Err(contract(
                "cluster means need K equally sized, non-empty rows",
            ));
        }
        if counts.len() != means.len() {
            return Err(contract("one count per class"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(contract("cluster means must be finite"));
        }
        Ok(Self { means, counts, m })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Mean of class `y` as a `[1×D_r]` row.
    pub fn row(&self, y: usize) -> Tensor {
        Tensor::new(vec![1, self.dim()], self.means[y].clone()).expect("means are finite")
    }

    /// Means of `labels`, one row each.
    pub fn rows(&self, labels: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = labels.iter().map(|&y| self.means[y].clone()).collect();
        Tensor::from_rows(&rows).expect("means are finite")
    }
}

/// Averages the invariant latent of one `m`-sized draw per class member.
/// Draws may include the member itself. Classes and members are visited in
/// pool order, so the result depends only on `rng`.
pub fn compute_cluster_means(
    model: &EquiVae,
    pool: &ClassPool,
    m: usize,
    rng: &mut Rng,
) -> Result<ClusterMeans> {
    if pool.num_classes() != model.num_classes() {
        return Err(contract("pool and model disagree on the class count"));
    }
    let dim = model.config().latent_r;
    let mut means = Vec::with_capacity(pool.num_classes());
    let mut counts = Vec::with_capacity(pool.num_classes());
    for y in 0..pool.num_classes() {
        let members = pool.class_members(y);
        if members.is_empty() {
            return Err(contract(format!("class {y} has no members")));
        }
        let sets = members
            .iter()
            .map(|_| sample_complementary(pool, y, None, m, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = vec![0.0; dim];
        for chunk in sets.chunks(CHUNK.div_ceil(m).max(1)) {
            let images = stack_images(chunk.iter().flatten().map(|&i| pool.example(i)))
                .expect("non-empty chunk");
            let tape = Tape::new();
            let r = model
                .encode_invariant(&tape, tape.constant(images), &vec![m; chunk.len()])?
                .value();
            for row in 0..chunk.len() {
                for (s, v) in sum.iter_mut().zip(r.row(row)) {
                    *s += v;
                }
            }
        }
        means.push(sum.iter().map(|s| s / members.len() as f64).collect());
        counts.push(members.len());
    }
    ClusterMeans::new(means, counts, m)
}

/// `p(y|x) ∝ exp(−‖f(x) − r̄_y‖²)` for each row of `features` `[N×D_r]`.
pub fn distance_classify(features: &Tensor, means: &ClusterMeans) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[1] != means.dim() {
        return Err(contract(format!(
            "features of shape {:?} do not match {}-dimensional means",
            features.shape(),
            means.dim()
        )));
    }
    let k = means.num_classes();
    let mut out = Vec::with_capacity(features.shape()[0] * k);
    for i in 0..features.shape()[0] {
        let f = features.row(i);
        let logits: Vec<f64> = means
            .means
            .iter()
            .map(|mu| {
                -f.iter()
                    .zip(mu)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        out.extend(logits.iter().map(|l| (l - max).exp() / z));
    }
    Ok(Tensor::new(vec![features.shape()[0], k], out)?)
}

/// Error rate and confusion counts. `confusion[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub error_rate: f64,
    pub n: usize,
    pub errors: usize,
    pub class_counts: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

impl ClassificationReport {
    /// Builds a report from true labels and class probabilities `[N×K]`.
    /// Ties go to the lowest class index.
    pub fn from_probs(labels: &[usize], probs: &Tensor) -> Result<Self> {
        if labels.is_empty() {
            return Err(contract("cannot report on an empty split"));
        }
        if probs.rank() != 2 || probs.shape()[0] != labels.len() {
            return Err(contract("one probability row per label"));
        }
        let k = probs.shape()[1];
        let predicted: Vec<usize> = (0..labels.len()).map(|i| argmax(probs.row(i))).collect();
        Self::from_predictions(labels, &predicted, k)
    }

    pub fn from_predictions(labels: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if labels.is_empty() || labels.len() != predicted.len() {
            return Err(contract(
                "need one prediction per label and at least one label",
            ));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&y, &p) in labels.iter().zip(predicted) {
            if y >= k || p >= k {
                return Err(contract(format!(
                    "label {y} or prediction {p} out of range for {k} classes"
                )));
            }
            confusion[y][p] += 1;
        }
        let class_counts: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let errors = labels.iter().zip(predicted).filter(|(y, p)| y != p).count();
        Ok(Self {
            error_rate: errors as f64 / labels.len() as f64,
            n: labels.len(),
            errors,
            class_counts,
            confusion,
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Distance-classifies `examples` with the single-image embedding `f(x)`.
pub fn evaluate_distance_classifier(
    model: &EquiVae,
    means: &ClusterMeans,
    examples: &[LabelledExample],
) -> Result<ClassificationReport> {
    if examples.is_empty() {
        return Err(contract("cannot evaluate an empty split"));
    }
    let mut probs = Vec::with_capacity(examples.len() * means.num_classes());
    for chunk in examples.chunks(CHUNK) {
        let features = model.infer_invariant(&stack_images(chunk).expect("non-empty chunk"))?;
        probs.extend_from_slice(distance_classify(&features, means)?.data());
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let probs = Tensor::new(vec![examples.len(), means.num_classes()], probs)?;
    ClassificationReport::from_probs(&labels, &probs)
}
