use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::schedule::{batch_schedule, default_milestones};
use crate::data::{ClassPool, LabelledBatch, LabelledExample, UnlabelledBatch};
use crate::error::{config, Error, Result};
use crate::eval::{compute_cluster_means, evaluate_distance_classifier};
use crate::model::EquiVae;
use crate::objectives::{
    draw_eps, labelled_elbo, semi_supervised_objective, ClassPrior, ElboTerms,
};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{Gradients, TensorError, Var};

fn default_initial_batch() -> usize {
    32
}
fn default_max_batch() -> usize {
    256
}
fn default_m_max() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_initial_batch")]
    pub initial_batch: usize,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// Epochs at which the batch size doubles. Defaults to the quarter points.
    #[serde(default)]
    pub milestones: Option<Vec<usize>>,
    /// Complementary set sizes are drawn from `1..=m_max`.
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Adds `log q(y|x)` to the labelled bound in supervised mode.
    #[serde(default)]
    pub classifier_term: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            initial_batch: default_initial_batch(),
            max_batch: default_max_batch(),
            milestones: None,
            m_max: default_m_max(),
            classifier_term: false,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be at least 1"));
        }
        for (name, b) in [
            ("initial_batch", self.initial_batch),
            ("max_batch", self.max_batch),
        ] {
            if b < 32 || !b.is_power_of_two() {
                return Err(config(format!(
                    "{name} must be a power of two of at least 32, got {b}"
                )));
            }
        }
        if self.max_batch < self.initial_batch {
            return Err(config("max_batch must not be below initial_batch"));
        }
        if self.m_max == 0 {
            return Err(config("m_max must be at least 1"));
        }
        let a = &self.adam;
        let finite = [a.lr, a.beta1, a.beta2, a.eps]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || a.lr < 0.0
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || a.eps <= 0.0
        {
            return Err(config("adam needs lr >= 0, betas in [0, 1) and eps > 0"));
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.milestones
            .clone()
            .unwrap_or_else(|| default_milestones(self.epochs))
    }

    pub fn batch_size(&self, epoch: usize) -> usize {
        batch_schedule(
            epoch,
            &self.milestones(),
            self.initial_batch,
            self.max_batch,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Semi,
}

/// Summary of one epoch. `elbo` holds per-example means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub examples: usize,
    pub elbo: ElboTerms,
    /// Distance-classifier error on the validation split, when one exists.
    pub validation_error: Option<f64>,
    /// Kept out of the serialised record so logs stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Owns the model and optimizer state for one training run.
pub struct Trainer {
    pub model: EquiVae,
    pub adam: AdamState,
    config: TrainConfig,
    mode: Mode,
    pool: ClassPool,
    unlabelled: Vec<LabelledExample>,
    validation: Vec<LabelledExample>,
    prior: ClassPrior,
    rng: Rng,
    seed: u64,
    eval_m: usize,
    epoch: usize,
    label_order: Vec<usize>,
    label_pos: usize,
    last_good: Option<usize>,
}

#[derive(Default)]
struct Tally {
    sums: ElboTerms,
    examples: usize,
    steps: usize,
}

impl Trainer {
    /// `pool` holds the labelled training data; `unlabelled` is ignored in
    /// supervised mode. The class prior is the labelled class frequency.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: EquiVae,
        config: TrainConfig,
        mode: Mode,
        pool: ClassPool,
        unlabelled: Vec<LabelledExample>,
        validation: Vec<LabelledExample>,
        seed: u64,
        eval_m: usize,
    ) -> Result<Self> {
        config.validate()?;
        if pool.num_classes() != model.num_classes() {
            return Err(crate::error::config(
                "labelled pool and model disagree on the class count",
            ));
        }
        let needs_posterior = mode == Mode::Semi || config.classifier_term;
        if needs_posterior && model.label_posterior.is_none() {
            return Err(crate::error::config(
                "semi-supervised mode and the classifier term need model.label_posterior = true",
            ));
        }
        if eval_m == 0 {
            return Err(crate::error::config("evaluation m must be at least 1"));
        }
        let prior =
            ClassPrior::from_labels(pool.examples().iter().map(|e| e.label), pool.num_classes())?;
        let adam = AdamState::new(&model.params, config.adam);
        Ok(Self {
            model,
            adam,
            config,
            mode,
            pool,
            unlabelled,
            validation,
            prior,
            rng: rng::stream(seed, Stream::Training),
            seed,
            eval_m,
            epoch: 0,
            label_order: Vec::new(),
            label_pos: 0,
            last_good: None,
        })
    }

    pub fn prior(&self) -> &ClassPrior {
        &self.prior
    }

    pub fn pool(&self) -> &ClassPool {
        &self.pool
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Runs every remaining epoch, handing each record to `on_epoch`.
    pub fn fit(
        &mut self,
        mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            let record = self.run_epoch()?;
            on_epoch(&record)?;
            records.push(record);
        }
        Ok(records)
    }

    /// One pass over the training data followed by validation.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let batch_size = self.config.batch_size(self.epoch);
        let tally = match self.mode {
            Mode::Semi if !self.unlabelled.is_empty() => self.semi_epoch(batch_size)?,
            Mode::Semi => self.supervised_epoch(batch_size, true)?,
            Mode::Supervised => self.supervised_epoch(batch_size, self.config.classifier_term)?,
        };
        let validation_error = self.validation_error()?;
        let record = MetricsRecord {
            epoch: self.epoch,
            batch_size,
            steps: tally.steps,
            examples: tally.examples,
            elbo: tally.sums.scaled(1.0 / tally.examples as f64),
            validation_error,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {} batch {} elbo {:.4} recon {:.4} kl_v {:.4} val_err {:?}",
            record.epoch,
            batch_size,
            record.elbo.total,
            record.elbo.reconstruction,
            record.elbo.kl_v,
            record.validation_error
        );
        self.last_good = Some(self.epoch);
        self.epoch += 1;
        Ok(record)
    }

    fn supervised_epoch(&mut self, batch_size: usize, classifier_term: bool) -> Result<Tally> {
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut self.rng);
        let mut tally = Tally::default();
        let latent_v = self.model.config().latent_v;
        for chunk in order.chunks(batch_size) {
            let batch = LabelledBatch::build(&self.pool, chunk, self.config.m_max, &mut self.rng)?;
            let eps = draw_eps(batch.len(), latent_v, &mut self.rng);
            let tape = crate::Tape::new();
            self.model.params.bind_all(&tape);
            let elbo = labelled_elbo(
                &self.model,
                &tape,
                &batch,
                &eps,
                &self.prior,
                classifier_term,
                Some(&mut self.rng),
            )?;
            tally.sums = tally.sums.add(&elbo.summed());
            self.step(elbo.objective(), batch.len(), &mut tally)?;
        }
        Ok(tally)
    }

    fn next_labelled(&mut self, count: usize) -> Vec<usize> {
        (0..count)
            .map(|_| {
                if self.label_pos == self.label_order.len() {
                    self.label_order = (0..self.pool.len()).collect();
                    self.label_order.shuffle(&mut self.rng);
                    self.label_pos = 0;
                }
                self.label_pos += 1;
                self.label_order[self.label_pos - 1]
            })
            .collect()
    }

    fn semi_epoch(&mut self, batch_size: usize) -> Result<Tally> {
        let mut order: Vec<usize> = (0..self.unlabelled.len()).collect();
        order.shuffle(&mut self.rng);
        let mut tally = Tally::default();
        let (latent_v, k) = (self.model.config().latent_v, self.model.num_classes());
        let unlabelled = std::mem::take(&mut self.unlabelled);
        let result = (|| {
            for chunk in order.chunks(batch_size) {
                let targets = self.next_labelled(batch_size.min(self.pool.len()));
                let lab =
                    LabelledBatch::build(&self.pool, &targets, self.config.m_max, &mut self.rng)?;
                let lab_eps = draw_eps(lab.len(), latent_v, &mut self.rng);
                let members: Vec<&LabelledExample> =
                    chunk.iter().map(|&i| &unlabelled[i]).collect();
                let unl =
                    UnlabelledBatch::build(&self.pool, &members, self.config.m_max, &mut self.rng)?;
                let unl_eps: Vec<_> = (0..k)
                    .map(|_| draw_eps(unl.len(), latent_v, &mut self.rng))
                    .collect();
                let tape = crate::Tape::new();
                self.model.params.bind_all(&tape);
                let objective = semi_supervised_objective(
                    &self.model,
                    &tape,
                    Some((&lab, &lab_eps)),
                    Some((&unl, &unl_eps)),
                    &self.prior,
                    Some(&mut self.rng),
                )?;
                tally.sums = tally.sums.add(&objective.summed());
                self.step(objective.total, objective.examples(), &mut tally)?;
            }
            Ok(())
        })();
        self.unlabelled = unlabelled;
        result.map(|()| tally)
    }

    /// Gradient step on `−objective / examples`.
    fn step(&mut self, objective: Var<'_>, examples: usize, tally: &mut Tally) -> Result<()> {
        let loss = objective.scale(-1.0 / examples as f64);
        debug!("step {} loss {:.6}", self.adam.step + 1, loss.item());
        let grads: Gradients = loss.backward().map_err(|e| self.divergence(e))?;
        adam_step(&mut self.model.params, &grads, &mut self.adam)?;
        if self
            .model
            .params
            .ids()
            .any(|id| !self.model.params.get(id).is_finite())
        {
            return Err(self.divergence(TensorError::NonFiniteOp { op: "adam_step" }));
        }
        tally.examples += examples;
        tally.steps += 1;
        Ok(())
    }

    fn divergence(&self, err: TensorError) -> Error {
        match err {
            TensorError::NonFiniteOp { .. } => Error::Divergence {
                epoch: self.epoch,
                last_good: self
                    .last_good
                    .map_or("none".to_string(), |e| format!("epoch {e}")),
            },
            other => other.into(),
        }
    }

    fn validation_error(&self) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let mut eval_rng = rng::stream(self.seed, Stream::Eval);
        let means = compute_cluster_means(&self.model, &self.pool, self.eval_m, &mut eval_rng)?;
        let report = evaluate_distance_classifier(&self.model, &means, &self.validation)?;
        Ok(Some(report.error_rate))
    }
}
