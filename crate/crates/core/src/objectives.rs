//! Likelihoods, divergences and evidence lower bounds.
//!
//! Every bound is returned per example so callers can inspect single terms;
//! [`BatchElbo::objective`] sums the totals into the scalar that training
//! maximises.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{LabelledBatch, UnlabelledBatch};
use crate::error::{contract, Result};
use crate::model::{reparameterize, EquiVae, GaussianPosterior, Likelihood};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Value of each bound component. Fields that do not apply to a bound are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl_v: f64,
    pub log_prior_y: f64,
    pub kl_y: f64,
    pub classifier_term: f64,
    pub total: f64,
}

impl ElboTerms {
    pub fn add(&self, other: &ElboTerms) -> ElboTerms {
        ElboTerms {
            reconstruction: self.reconstruction + other.reconstruction,
            kl_v: self.kl_v + other.kl_v,
            log_prior_y: self.log_prior_y + other.log_prior_y,
            kl_y: self.kl_y + other.kl_y,
            classifier_term: self.classifier_term + other.classifier_term,
            total: self.total + other.total,
        }
    }

    pub fn scaled(&self, c: f64) -> ElboTerms {
        ElboTerms {
            reconstruction: c * self.reconstruction,
            kl_v: c * self.kl_v,
            log_prior_y: c * self.log_prior_y,
            kl_y: c * self.kl_y,
            classifier_term: c * self.classifier_term,
            total: c * self.total,
        }
    }
}

/// Class prior `p(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    probs: Vec<f64>,
}

impl ClassPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty()
            || probs.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(contract(format!(
                "class prior {probs:?} is not a probability vector"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    /// Relative class frequencies of `labels`.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for y in labels {
            *counts.get_mut(y).ok_or_else(|| {
                contract(format!("label {y} out of range for {classes} classes"))
            })? += 1;
        }
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(contract("class prior from an empty label set"));
        }
        Self::new(counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn log_prob(&self, y: usize) -> f64 {
        self.probs[y].ln()
    }
}

/// Per-example bound components, each of shape `[B]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchElbo<'t> {
    pub reconstruction: Var<'t>,
    pub kl_v: Var<'t>,
    pub log_prior_y: Var<'t>,
    pub kl_y: Var<'t>,
    pub classifier_term: Var<'t>,
    pub total: Var<'t>,
}

impl<'t> BatchElbo<'t> {
    pub fn len(&self) -> usize {
        self.total.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of the per-example totals.
    pub fn objective(&self) -> Var<'t> {
        self.total.sum()
    }

    fn columns(&self) -> [Tensor; 6] {
        [
            self.reconstruction.value(),
            self.kl_v.value(),
            self.log_prior_y.value(),
            self.kl_y.value(),
            self.classifier_term.value(),
            self.total.value(),
        ]
    }

    pub fn per_example(&self) -> Vec<ElboTerms> {
        let c = self.columns();
        (0..self.len())
            .map(|i| ElboTerms {
                reconstruction: c[0].data()[i],
                kl_v: c[1].data()[i],
                log_prior_y: c[2].data()[i],
                kl_y: c[3].data()[i],
                classifier_term: c[4].data()[i],
                total: c[5].data()[i],
            })
            .collect()
    }

    pub fn summed(&self) -> ElboTerms {
        self.per_example()
            .iter()
            .fold(ElboTerms::default(), |acc, t| acc.add(t))
    }
}

fn per_example_sum<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let axes: Vec<usize> = (1..x.shape().len()).collect();
    Ok(x.sum_axes(&axes)?)
}

/// `Σ_pixels t·log m + (1−t)·log(1−m)` per example, logs guarded.
pub fn bernoulli_loglik<'t>(means: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if means.shape() != target.shape() {
        return Err(contract(format!(
            "bernoulli_loglik: means {:?} vs target {:?}",
            means.shape(),
            target.shape()
        )));
    }
    let on = target.mul(means.log_guarded())?;
    let off = target
        .neg()
        .add_scalar(1.0)
        .mul(means.neg().add_scalar(1.0).log_guarded())?;
    per_example_sum(on.add(off)?)
}

/// `Σ_pixels −½[(t−m)²·e^{−log_var} + log_var + log 2π]` per example.
pub fn gaussian_loglik<'t>(means: Var<'t>, log_var: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if means.shape() != target.shape() {
        return Err(contract(format!(
            "gaussian_loglik: means {:?} vs target {:?}",
            means.shape(),
            target.shape()
        )));
    }
    let precision = log_var.neg().exp();
    let sq = target.sub(means)?.square().mul(precision)?;
    let per_pixel = sq.add(log_var)?.add_scalar((2.0 * PI).ln()).scale(-0.5);
    per_example_sum(per_pixel)
}

/// `½ Σ_d (μ² + σ² − 1 − log σ²)` per example.
pub fn kl_gaussian_to_unit<'t>(post: &GaussianPosterior<'t>) -> Result<Var<'t>> {
    let inner = post
        .mu
        .square()
        .add(post.sigma.square())?
        .sub(post.half_log_var.scale(2.0))?
        .add_scalar(-1.0);
    Ok(inner.sum_axes(&[1])?.scale(0.5))
}

/// Plain-value form of [`kl_gaussian_to_unit`] for one example.
pub fn kl_gaussian_to_unit_values(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// `Σ_y q_y log(q_y / p_y)` with `0·log 0 = 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(contract(format!(
            "kl_categorical: {} vs {} classes",
            q.len(),
            p.len()
        )));
    }
    let mut kl = 0.0;
    for (y, (&qy, &py)) in q.iter().zip(p).enumerate() {
        if qy == 0.0 {
            continue;
        }
        if py == 0.0 {
            return Err(contract(format!(
                "infinite divergence: q({y}) = {qy} but p({y}) = 0"
            )));
        }
        kl += qy * (qy / py).ln();
    }
    Ok(kl)
}

/// Log-likelihood of `target` under the decoder at latents `(r, v)`.
pub fn reconstruction<'t>(
    model: &EquiVae,
    tape: &'t Tape,
    r: Var<'t>,
    v: Var<'t>,
    target: Var<'t>,
) -> Result<Var<'t>> {
    let means = model.decode(tape, r, v)?;
    match (model.config().likelihood, model.log_var) {
        (Likelihood::Bernoulli, _) => bernoulli_loglik(means, target),
        (Likelihood::Gaussian, Some(id)) => {
            gaussian_loglik(means, model.params.var(tape, id), target)
        }
        (Likelihood::Gaussian, None) => {
            Err(contract("gaussian model without a log-variance parameter"))
        }
    }
}

fn check_eps(eps: &Tensor, batch: usize, latent: usize) -> Result<()> {
    if eps.shape() != [batch, latent] {
        return Err(contract(format!(
            "noise of shape {:?} for batch {batch} and latent {latent}",
            eps.shape()
        )));
    }
    Ok(())
}

/// Standard normal noise for one batch, `[B×D_v]`.
pub fn draw_eps(batch: usize, latent: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(
        vec![batch, latent],
        crate::rng::standard_normal(rng, batch * latent),
    )
    .expect("finite noise")
}

/// Single-sample labelled bound: reconstruction at a reparameterised draw,
/// minus the style KL, plus `log p(y)` and, when enabled, `log q(y|x)`.
pub fn labelled_elbo<'t>(
    model: &EquiVae,
    tape: &'t Tape,
    batch: &LabelledBatch,
    eps: &Tensor,
    prior: &ClassPrior,
    classifier_term: bool,
    rng: Option<&mut Rng>,
) -> Result<BatchElbo<'t>> {
    let b = batch.len();
    check_eps(eps, b, model.config().latent_v)?;
    if prior.num_classes() != model.num_classes() {
        return Err(contract(
            "class prior size differs from the model's class count",
        ));
    }
    for (i, (id, comp)) in batch.ids.iter().zip(&batch.complementary_ids).enumerate() {
        if comp.contains(id) {
            return Err(contract(format!(
                "complementary set of example {i} contains its target id {id}"
            )));
        }
    }
    let x = tape.constant(batch.images.clone());
    let r = model.encode_invariant(
        tape,
        tape.constant(batch.complementary.clone()),
        &batch.set_sizes,
    )?;
    let post = model.encode_equivariant(tape, r, x)?;
    let v = reparameterize(&post, tape.constant(eps.clone()))?;
    let recon = reconstruction(model, tape, r, v, x)?;
    let kl_v = kl_gaussian_to_unit(&post)?;
    let log_prior = tape.constant(Tensor::vector(
        batch.labels.iter().map(|&y| prior.log_prob(y)).collect(),
    )?);
    let zeros = tape.constant(Tensor::zeros(&[b]));
    let cls = if classifier_term {
        let log_q = model.label_log_posterior(tape, x, rng)?;
        let mut onehot = Tensor::zeros(&[b, model.num_classes()]);
        for (i, &y) in batch.labels.iter().enumerate() {
            onehot.data_mut()[i * model.num_classes() + y] = 1.0;
        }
        log_q.mul(tape.constant(onehot))?.sum_axes(&[1])?
    } else {
        zeros
    };
    let total = recon.sub(kl_v)?.add(log_prior)?.add(cls)?;
    Ok(BatchElbo {
        reconstruction: recon,
        kl_v,
        log_prior_y: log_prior,
        kl_y: zeros,
        classifier_term: cls,
        total,
    })
}

/// Unlabelled bound with the label posterior supplied by the caller.
/// Entries of `log_q` where `q` is zero are ignored.
pub fn unlabelled_elbo_given_posterior<'t>(
    model: &EquiVae,
    tape: &'t Tape,
    batch: &UnlabelledBatch,
    eps: &[Tensor],
    prior: &ClassPrior,
    q: Var<'t>,
    log_q: Var<'t>,
) -> Result<BatchElbo<'t>> {
    let (b, k) = (batch.len(), model.num_classes());
    if batch.per_class.len() != k || eps.len() != k || prior.num_classes() != k {
        return Err(contract(format!(
            "unlabelled bound needs {k} class pools, noise draws and prior entries"
        )));
    }
    if q.shape() != [b, k] || log_q.shape() != [b, k] {
        return Err(contract(
            "label posterior shape differs from [batch, classes]",
        ));
    }
    let x = tape.constant(batch.images.clone());
    let embedding = model.covariant_embedding(tape, x)?;
    let mut recon_cols = Vec::with_capacity(k);
    let mut kl_cols = Vec::with_capacity(k);
    for (y, sets) in batch.per_class.iter().enumerate() {
        if sets.set_sizes.len() != b {
            return Err(contract(format!(
                "class {y} has {} sets for {b} examples",
                sets.set_sizes.len()
            )));
        }
        check_eps(&eps[y], b, model.config().latent_v)?;
        let r =
            model.encode_invariant(tape, tape.constant(sets.images.clone()), &sets.set_sizes)?;
        let post = model.posterior_from_embedding(tape, embedding, r)?;
        let v = reparameterize(&post, tape.constant(eps[y].clone()))?;
        recon_cols.push(reconstruction(model, tape, r, v, x)?.reshape(&[b, 1])?);
        kl_cols.push(kl_gaussian_to_unit(&post)?.reshape(&[b, 1])?);
    }
    let recon = Var::concat_cols(&recon_cols)?.mul(q)?.sum_axes(&[1])?;
    let kl_v = Var::concat_cols(&kl_cols)?.mul(q)?.sum_axes(&[1])?;
    let log_p = tape.constant(Tensor::vector(
        prior.probs().iter().map(|p| p.ln()).collect(),
    )?);
    if prior.probs().contains(&0.0) && q.with_value(|t| t.data().iter().any(|&v| v > 0.0)) {
        // q is strictly positive wherever it comes from a softmax
        let y = prior.probs().iter().position(|&p| p == 0.0).unwrap();
        return Err(contract(format!(
            "infinite divergence: class {y} has zero prior mass"
        )));
    }
    let kl_y = q.mul(log_q.sub(log_p)?)?.sum_axes(&[1])?;
    let zeros = tape.constant(Tensor::zeros(&[b]));
    let total = recon.sub(kl_v)?.sub(kl_y)?;
    Ok(BatchElbo {
        reconstruction: recon,
        kl_v,
        log_prior_y: zeros,
        kl_y,
        classifier_term: zeros,
        total,
    })
}

/// Unlabelled bound with exact enumeration over classes:
/// `Σ_y q(y|x)·[recon_y − KL_v,y] − KL[q(y|x) ‖ p(y)]`.
pub fn unlabelled_elbo<'t>(
    model: &EquiVae,
    tape: &'t Tape,
    batch: &UnlabelledBatch,
    eps: &[Tensor],
    prior: &ClassPrior,
    rng: Option<&mut Rng>,
) -> Result<BatchElbo<'t>> {
    let log_q = model.label_log_posterior(tape, tape.constant(batch.images.clone()), rng)?;
    unlabelled_elbo_given_posterior(model, tape, batch, eps, prior, log_q.exp(), log_q)
}

/// Combined labelled and unlabelled bounds of one optimisation step.
#[derive(Debug, Clone, Copy)]
pub struct SemiObjective<'t> {
    pub labelled: Option<BatchElbo<'t>>,
    pub unlabelled: Option<BatchElbo<'t>>,
    pub total: Var<'t>,
}

impl SemiObjective<'_> {
    pub fn examples(&self) -> usize {
        self.labelled.map_or(0, |b| b.len()) + self.unlabelled.map_or(0, |b| b.len())
    }

    pub fn summed(&self) -> ElboTerms {
        let l = self.labelled.map(|b| b.summed()).unwrap_or_default();
        let u = self.unlabelled.map(|b| b.summed()).unwrap_or_default();
        l.add(&u)
    }
}

/// `Σ L_unlabelled + Σ L_labelled`, with the classifier term on for labelled examples.
pub fn semi_supervised_objective<'t>(
    model: &EquiVae,
    tape: &'t Tape,
    labelled: Option<(&LabelledBatch, &Tensor)>,
    unlabelled: Option<(&UnlabelledBatch, &[Tensor])>,
    prior: &ClassPrior,
    mut rng: Option<&mut Rng>,
) -> Result<SemiObjective<'t>> {
    let labelled = labelled.filter(|(b, _)| !b.is_empty());
    let unlabelled = unlabelled.filter(|(b, _)| !b.is_empty());
    if labelled.is_none() && unlabelled.is_none() {
        return Err(contract(
            "semi-supervised objective needs at least one non-empty batch",
        ));
    }
    let lab = labelled
        .map(|(batch, eps)| labelled_elbo(model, tape, batch, eps, prior, true, rng.as_deref_mut()))
        .transpose()?;
    let unl = unlabelled
        .map(|(batch, eps)| unlabelled_elbo(model, tape, batch, eps, prior, rng))
        .transpose()?;
    let total = match (lab, unl) {
        (Some(l), Some(u)) => u.objective().add(l.objective())?,
        (Some(l), None) => l.objective(),
        (None, Some(u)) => u.objective(),
        (None, None) => unreachable!(),
    };
    Ok(SemiObjective {
        labelled: lab,
        unlabelled: unl,
        total,
    })
}
