use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClassificationReport, CHUNK};
use crate::data::{stack_images, LabelledExample};
use crate::error::{contract, Result};
use crate::model::{BenchmarkClassifier, EmbeddingClassifier, ModelConfig};
use crate::nn::ParameterStore;
use crate::rng::{self, Rng, Stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{adam_step, AdamConfig, AdamState};

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}

/// Optimisation settings for the classification heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            adam: AdamConfig::default(),
        }
    }
}

trait Classifier {
    fn params(&self) -> &ParameterStore;
    fn params_mut(&mut self) -> &mut ParameterStore;
    fn log_probs<'t>(&self, tape: &'t Tape, x: Var<'t>, rng: Option<&mut Rng>) -> Result<Var<'t>>;
}

impl Classifier for BenchmarkClassifier {
    fn params(&self) -> &ParameterStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }
    fn log_probs<'t>(&self, tape: &'t Tape, x: Var<'t>, rng: Option<&mut Rng>) -> Result<Var<'t>> {
        BenchmarkClassifier::log_probs(self, tape, x, rng)
    }
}

impl Classifier for EmbeddingClassifier {
    fn params(&self) -> &ParameterStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }
    fn log_probs<'t>(&self, tape: &'t Tape, x: Var<'t>, rng: Option<&mut Rng>) -> Result<Var<'t>> {
        EmbeddingClassifier::log_probs(self, tape, x, rng)
    }
}

/// Gathers rows `idx` of `x` along the leading axis.
fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| x.row(i)).collect();
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, rows.concat()).expect("rows of a valid tensor")
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data).expect("finite one-hot")
}

/// Minimises mean negative log-likelihood with dropout active.
fn fit<C: Classifier>(
    clf: &mut C,
    x: &Tensor,
    labels: &[usize],
    k: usize,
    config: &HeadTrainConfig,
    rng: &mut Rng,
) -> Result<()> {
    if config.batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let mut adam = AdamState::new(clf.params(), config.adam);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let lp = clf.log_probs(&tape, tape.constant(gather(x, chunk)), Some(rng))?;
            let target = tape.constant(one_hot(&batch_labels, k));
            let loss = lp.mul(target)?.sum().scale(-1.0 / chunk.len() as f64);
            let grads = loss.backward()?;
            adam_step(clf.params_mut(), &grads, &mut adam)?;
        }
    }
    Ok(())
}

fn report<C: Classifier>(
    clf: &C,
    x: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<ClassificationReport> {
    let n = labels.len();
    let mut probs = Vec::with_capacity(n * k);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let tape = Tape::new();
        let lp = clf.log_probs(&tape, tape.constant(gather(x, chunk)), None)?;
        probs.extend_from_slice(lp.value().data());
    }
    ClassificationReport::from_probs(labels, &Tensor::new(vec![n, k], probs)?)
}

fn check_split(x: &Tensor, labels: &[usize], k: usize, what: &str) -> Result<()> {
    if labels.is_empty() || x.rank() < 2 || x.shape()[0] != labels.len() {
        return Err(contract(format!(
            "{what} split needs one non-empty row per label"
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(contract(format!(
            "{what} label {y} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Trains a dropout head on fixed features `[N×D]` and reports test error.
#[allow(clippy::too_many_arguments)]
pub fn train_embedding_classifier(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    widths: &[usize],
    dropout: f64,
    config: &HeadTrainConfig,
    seed: u64,
) -> Result<ClassificationReport> {
    check_split(train_x, train_y, classes, "training")?;
    check_split(test_x, test_y, classes, "test")?;
    if train_x.rank() != 2 || test_x.shape()[1..] != train_x.shape()[1..] {
        return Err(contract("features must be [N×D] with matching D"));
    }
    let mut clf = EmbeddingClassifier::new(
        train_x.shape()[1],
        widths,
        classes,
        dropout,
        &mut rng::stream(seed, Stream::Init),
    )?;
    fit(
        &mut clf,
        train_x,
        train_y,
        classes,
        config,
        &mut rng::stream(seed, Stream::Training),
    )?;
    report(&clf, test_x, test_y, classes)
}

/// Trains the end-to-end benchmark classifier on labelled images alone.
pub fn train_benchmark_classifier(
    model: &ModelConfig,
    train: &[LabelledExample],
    test: &[LabelledExample],
    config: &HeadTrainConfig,
    seed: u64,
) -> Result<ClassificationReport> {
    let stack = |s: &[LabelledExample], what: &str| {
        stack_images(s).ok_or_else(|| contract(format!("{what} split is empty")))
    };
    let (train_x, test_x) = (stack(train, "training")?, stack(test, "test")?);
    let train_y: Vec<usize> = train.iter().map(|e| e.label).collect();
    let test_y: Vec<usize> = test.iter().map(|e| e.label).collect();
    let k = model.num_classes;
    check_split(&train_x, &train_y, k, "training")?;
    check_split(&test_x, &test_y, k, "test")?;
    let mut clf = BenchmarkClassifier::new(model, &mut rng::stream(seed, Stream::Init))?;
    fit(
        &mut clf,
        &train_x,
        &train_y,
        k,
        config,
        &mut rng::stream(seed, Stream::Training),
    )?;
    report(&clf, &test_x, &test_y, k)
}
