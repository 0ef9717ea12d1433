mod common;

use std::f64::consts::{LN_2, PI};

use common::{
    jitter_biases, normal, objective, param_gradcheck, split_gradcheck, toy_config, toy_examples,
    toy_model, toy_pool, unit_image,
};
use equivae::data::{ClassPool, LabelledBatch, LabelledExample, UnlabelledBatch};
use equivae::model::{reparameterize, GaussianPosterior};
use equivae::model::{EquiVae, Likelihood};
use equivae::objectives::{
    bernoulli_loglik, draw_eps, gaussian_loglik, kl_categorical, kl_gaussian_to_unit,
    kl_gaussian_to_unit_values, labelled_elbo, reconstruction, semi_supervised_objective,
    unlabelled_elbo, unlabelled_elbo_given_posterior, ClassPrior, ElboTerms,
};
use equivae::rng::{self, Stream};
use equivae::tensor::LOG_GUARD;
use equivae::{Tape, Tensor};
use rand::Rng as _;

const H: f64 = 1e-5;

/// For each target, every other member of its class.
fn leave_one_out(pool: &ClassPool, targets: &[usize]) -> Vec<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            let y = pool.example(t).label;
            pool.class_members(y)
                .iter()
                .copied()
                .filter(|&i| i != t)
                .collect()
        })
        .collect()
}

fn assert_terms_consistent(t: &ElboTerms) {
    let rebuilt = t.reconstruction - t.kl_v + t.log_prior_y - t.kl_y + t.classifier_term;
    assert!((rebuilt - t.total).abs() <= 1e-9 * t.total.abs().max(1.0));
    assert!(t.kl_v >= 0.0 && t.kl_y >= 0.0);
}

// ---------------------------------------------------------------------------
// Likelihoods and divergences

#[test]
fn bernoulli_loglik_examples() {
    let tape = Tape::new();
    let target = unit_image(&[2, 1, 2, 4], 1);
    let half = tape.constant(Tensor::full(&[2, 1, 2, 4], 0.5));
    let ll = bernoulli_loglik(half, tape.constant(target.clone()))
        .unwrap()
        .value();
    for &v in ll.data() {
        assert!((v - 8.0 * 0.5f64.ln()).abs() < 1e-12);
    }
    let pattern = Tensor::new(vec![1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let ll = bernoulli_loglik(tape.constant(pattern.clone()), tape.constant(pattern)).unwrap();
    assert!(ll.item().abs() < 1e-9);

    let m = [0.2, 0.7, 0.55, 0.9];
    let t = [0.0, 1.0, 0.3, 0.8];
    let expect: f64 = m
        .iter()
        .zip(&t)
        .map(|(&m, &t): (&f64, &f64)| {
            t * m.max(LOG_GUARD).ln() + (1.0 - t) * (1.0 - m).max(LOG_GUARD).ln()
        })
        .sum();
    let got = bernoulli_loglik(
        tape.constant(Tensor::new(vec![1, 4], m.to_vec()).unwrap()),
        tape.constant(Tensor::new(vec![1, 4], t.to_vec()).unwrap()),
    )
    .unwrap()
    .item();
    assert_eq!(got, expect);
    assert!(bernoulli_loglik(half, tape.constant(Tensor::zeros(&[2, 8]))).is_err());
}

#[test]
fn gaussian_loglik_examples() {
    let tape = Tape::new();
    let m = tape.constant(normal(&[1, 6], 1));
    let zero = tape.constant(Tensor::scalar(0.0));
    let ll = gaussian_loglik(m, zero, m).unwrap().item();
    assert!((ll + 3.0 * (2.0 * PI).ln()).abs() < 1e-12);

    let one = |v: f64| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
    let ll = gaussian_loglik(one(0.0), zero, one(1.0)).unwrap().item();
    assert!((ll + 0.5 * (1.0 + (2.0 * PI).ln())).abs() < 1e-12);

    let (means, targets, lv) = ([0.3, -1.0, 2.0], [0.1, 0.5, 1.5], 0.7f64);
    let expect: f64 = means
        .iter()
        .zip(&targets)
        .map(|(m, t)| -0.5 * ((t - m) * (t - m) / lv.exp() + lv + (2.0 * PI).ln()))
        .sum();
    let got = gaussian_loglik(
        tape.constant(Tensor::new(vec![1, 3], means.to_vec()).unwrap()),
        tape.constant(Tensor::scalar(lv)),
        tape.constant(Tensor::new(vec![1, 3], targets.to_vec()).unwrap()),
    )
    .unwrap()
    .item();
    assert!((got - expect).abs() < 1e-12);
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn gaussian_kl_matches_quadrature() {
    assert_eq!(kl_gaussian_to_unit_values(&[0.0], &[1.0]), 0.0);
    assert!((kl_gaussian_to_unit_values(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    let mut rng = rng::stream(0, Stream::Data);
    for _ in 0..20 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let sigma: f64 = rng.random_range(0.2..3.0);
        let integrand = |v: f64| {
            let z = (v - mu) / sigma;
            let q = (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt());
            q * (-sigma.ln() - 0.5 * z * z + 0.5 * v * v)
        };
        let numeric = simpson(integrand, mu - 14.0 * sigma, mu + 14.0 * sigma, 20_000);
        let closed = kl_gaussian_to_unit_values(&[mu], &[sigma]);
        assert!(
            (numeric - closed).abs() < 1e-6,
            "mu {mu} sigma {sigma}: {numeric} vs {closed}"
        );
    }
}

#[test]
fn gaussian_kl_fuzz_is_non_negative_and_consistent() {
    let n = 10_000;
    let mut rng = rng::stream(1, Stream::Data);
    let mu: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
    let hlv: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-3.0..2.0)).collect();
    let tape = Tape::new();
    let half_log_var = tape.constant(Tensor::new(vec![n, 3], hlv).unwrap());
    let post = GaussianPosterior {
        mu: tape.constant(Tensor::new(vec![n, 3], mu.clone()).unwrap()),
        half_log_var,
        sigma: half_log_var.exp(),
    };
    let kl = kl_gaussian_to_unit(&post).unwrap().value();
    let sigma = post.sigma.value();
    for i in 0..n {
        let direct = kl_gaussian_to_unit_values(&mu[i * 3..i * 3 + 3], sigma.row(i));
        assert!(kl.data()[i] >= 0.0 && direct >= 0.0);
        assert!((kl.data()[i] - direct).abs() <= 1e-10 * direct.max(1.0));
    }
}

fn random_simplex(k: usize, rng: &mut equivae::rng::Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn categorical_kl_examples_and_fuzz() {
    assert_eq!(kl_categorical(&[0.25; 4], &[0.25; 4]).unwrap(), 0.0);
    assert_eq!(kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), LN_2);
    assert!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    assert!(kl_categorical(&[0.5, 0.5], &[1.0]).is_err());
    let mut rng = rng::stream(2, Stream::Data);
    let (q, p) = (random_simplex(5, &mut rng), random_simplex(5, &mut rng));
    let mut direct = 0.0;
    for y in 0..5 {
        direct += q[y] * (q[y] / p[y]).ln();
    }
    assert_eq!(kl_categorical(&q, &p).unwrap(), direct);
    for _ in 0..10_000 {
        let k = rng.random_range(2..8);
        let (q, p) = (random_simplex(k, &mut rng), random_simplex(k, &mut rng));
        assert!(kl_categorical(&q, &p).unwrap() >= 0.0);
    }
}

#[test]
fn class_prior_from_labels() {
    let prior = ClassPrior::from_labels([0, 0, 1, 2], 3).unwrap();
    assert_eq!(prior.probs(), &[0.5, 0.25, 0.25]);
    assert!(ClassPrior::from_labels([0, 3], 3).is_err());
    assert!(ClassPrior::new(vec![0.5, 0.6]).is_err());
}

// ---------------------------------------------------------------------------
// Independent plain-loop forward pass of the toy model

struct Plain<'a>(&'a EquiVae);

impl Plain<'_> {
    fn param(&self, name: &str) -> &Tensor {
        self.0.params.get(
            self.0
                .params
                .id_of(name)
                .unwrap_or_else(|| panic!("no {name}")),
        )
    }

    fn dense(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (w, b) = (
            self.param(&format!("{name}.weight")),
            self.param(&format!("{name}.bias")),
        );
        let (inputs, outputs) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), inputs);
        (0..outputs)
            .map(|j| {
                let mut acc = 0.0;
                for (k, &xk) in x.iter().enumerate() {
                    acc += xk * w.data()[k * outputs + j];
                }
                acc + b.data()[j]
            })
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter()
            .map(|x| if x > 0.0 { x } else { 0.0 })
            .collect()
    }

    fn embed(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let h = Self::relu(self.dense(&format!("{prefix}.mlp0"), x));
        Self::relu(self.dense(&format!("{prefix}.head"), &h))
    }

    fn invariant(&self, set: &[&[f64]]) -> Vec<f64> {
        let embeddings: Vec<Vec<f64>> = set
            .iter()
            .map(|x| self.embed("invariant.embed", x))
            .collect();
        let mut pooled = vec![0.0; embeddings[0].len()];
        for e in &embeddings {
            for (p, v) in pooled.iter_mut().zip(e) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= set.len() as f64);
        let h = Self::relu(self.dense("invariant.hidden", &pooled));
        self.dense("invariant.out", &h)
    }

    /// `(mu, half_log_var)`
    fn posterior(&self, r: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut joint = self.embed("covariant.embed", x);
        joint.extend(Self::relu(self.dense("covariant.from_r", r)));
        let mu = self.dense(
            "covariant.mu_out",
            &Self::relu(self.dense("covariant.mu_hidden", &joint)),
        );
        let hlv = self.dense(
            "covariant.sigma_out",
            &Self::relu(self.dense("covariant.sigma_hidden", &joint)),
        );
        (mu, hlv)
    }

    fn decode(&self, r: &[f64], v: &[f64]) -> Vec<f64> {
        let mut h = Self::relu(self.dense("decoder.from_r", r));
        h.extend(Self::relu(self.dense("decoder.from_v", v)));
        let h = Self::relu(self.dense("decoder.joint", &h));
        let h = Self::relu(self.dense("decoder.mlp0", &h));
        self.dense("decoder.out", &h)
            .into_iter()
            .map(|x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect()
    }

    fn log_label_posterior(&self, x: &[f64]) -> Vec<f64> {
        let mut joint = self.embed("label_posterior.embed", x);
        joint.extend(self.invariant(&[x]));
        let h = Self::relu(self.dense("label_posterior.head.hidden0", &joint));
        let h = Self::relu(self.dense("label_posterior.head.hidden1", &h));
        let logits = self.dense("label_posterior.head.out", &h);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }

    /// Labelled bound for one example, mirroring the operation order of the
    /// tape so the comparison can be exact.
    fn labelled(
        &self,
        x: &[f64],
        y: usize,
        set: &[&[f64]],
        eps: &[f64],
        prior: &ClassPrior,
        cls: bool,
    ) -> f64 {
        let r = self.invariant(set);
        let (mu, hlv) = self.posterior(&r, x);
        let sigma: Vec<f64> = hlv.iter().map(|h| h.exp()).collect();
        let v: Vec<f64> = (0..mu.len()).map(|d| mu[d] + sigma[d] * eps[d]).collect();
        let means = self.decode(&r, &v);
        let mut recon = 0.0;
        for (&m, &t) in means.iter().zip(x) {
            recon += t * m.max(LOG_GUARD).ln() + (-t + 1.0) * (-m + 1.0).max(LOG_GUARD).ln();
        }
        let mut kl = 0.0;
        for d in 0..mu.len() {
            kl += mu[d] * mu[d] + sigma[d] * sigma[d] - 2.0 * hlv[d] + -1.0;
        }
        kl *= 0.5;
        let classifier = if cls {
            self.log_label_posterior(x)[y]
        } else {
            0.0
        };
        recon - kl + prior.log_prob(y) + classifier
    }
}

#[test]
fn labelled_elbo_matches_plain_recomputation() {
    let model = toy_model(2, 3);
    let pool = toy_pool(2, 3, 4);
    let targets = [0, 1, 2, 5];
    let sets = leave_one_out(&pool, &targets);
    let batch = LabelledBatch::from_sets(&pool, &targets, &sets).unwrap();
    let eps = normal(&[4, 2], 5);
    let prior = ClassPrior::new(vec![0.6, 0.4]).unwrap();
    let plain = Plain(&model);
    for cls in [false, true] {
        let tape = Tape::new();
        let elbo = labelled_elbo(&model, &tape, &batch, &eps, &prior, cls, None).unwrap();
        for (i, terms) in elbo.per_example().iter().enumerate() {
            let t = pool.example(targets[i]);
            let set: Vec<&[f64]> = sets[i]
                .iter()
                .map(|&j| pool.example(j).image.data())
                .collect();
            let expect = plain.labelled(t.image.data(), t.label, &set, eps.row(i), &prior, cls);
            assert_eq!(terms.total, expect, "example {i}, classifier term {cls}");
            assert_terms_consistent(terms);
            assert_eq!(terms.kl_y, 0.0);
            assert_eq!(terms.classifier_term == 0.0, !cls);
        }
    }
}

#[test]
fn unit_posterior_annihilates_style_kl() {
    let mut model = toy_model(2, 0);
    for layer in [
        model.covariant.mu_out.clone(),
        model.covariant.sigma_out.clone(),
    ] {
        for id in [layer.weight, layer.bias] {
            let shape = model.params.get(id).shape().to_vec();
            model.params.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let pool = toy_pool(2, 3, 1);
    let targets = [0, 1];
    let batch = LabelledBatch::from_sets(&pool, &targets, &leave_one_out(&pool, &targets)).unwrap();
    let prior = ClassPrior::uniform(2);
    let tape = Tape::new();
    let elbo = labelled_elbo(
        &model,
        &tape,
        &batch,
        &normal(&[2, 2], 2),
        &prior,
        true,
        None,
    )
    .unwrap();
    for t in elbo.per_example() {
        assert_eq!(t.kl_v, 0.0);
        assert_eq!(
            t.total,
            t.reconstruction + t.log_prior_y + t.classifier_term
        );
    }
}

#[test]
fn single_class_prior_contributes_nothing() {
    let model = toy_model(1, 0);
    let pool = toy_pool(1, 3, 1);
    let batch = LabelledBatch::from_sets(&pool, &[0], &[vec![1, 2]]).unwrap();
    let tape = Tape::new();
    let elbo = labelled_elbo(
        &model,
        &tape,
        &batch,
        &normal(&[1, 2], 0),
        &ClassPrior::uniform(1),
        false,
        None,
    )
    .unwrap();
    assert_eq!(elbo.per_example()[0].log_prior_y, 0.0);
}

#[test]
fn target_inside_its_own_set_is_a_contract_violation() {
    let model = toy_model(2, 0);
    let pool = toy_pool(2, 3, 1);
    let batch = LabelledBatch::from_sets(&pool, &[0], &[vec![0, 2]]).unwrap();
    let tape = Tape::new();
    let err = labelled_elbo(
        &model,
        &tape,
        &batch,
        &normal(&[1, 2], 0),
        &ClassPrior::uniform(2),
        false,
        None,
    );
    assert!(matches!(err, Err(equivae::Error::Contract(_))));
}

#[test]
fn noise_shape_is_checked() {
    let model = toy_model(2, 0);
    let pool = toy_pool(2, 3, 1);
    let batch = LabelledBatch::from_sets(&pool, &[0], &[vec![2]]).unwrap();
    let tape = Tape::new();
    assert!(labelled_elbo(
        &model,
        &tape,
        &batch,
        &normal(&[2, 2], 0),
        &ClassPrior::uniform(2),
        false,
        None
    )
    .is_err());
}

// ---------------------------------------------------------------------------
// Unlabelled bound and the semi-supervised sum

fn outsiders(classes: usize, n: usize, seed: u64) -> Vec<LabelledExample> {
    toy_examples(classes, n, seed)
        .into_iter()
        .map(|mut e| {
            e.id += 10_000;
            e
        })
        .collect()
}

#[test]
fn single_class_unlabelled_bound_equals_labelled_bound() {
    let model = toy_model(1, 2);
    let pool = toy_pool(1, 4, 3);
    let targets = [0, 1, 2];
    let sets = leave_one_out(&pool, &targets);
    let lab = LabelledBatch::from_sets(&pool, &targets, &sets).unwrap();
    let examples: Vec<&LabelledExample> = targets.iter().map(|&t| pool.example(t)).collect();
    let unl = UnlabelledBatch::from_sets(&pool, &examples, std::slice::from_ref(&sets)).unwrap();
    let eps = normal(&[3, 2], 4);
    let prior = ClassPrior::uniform(1);
    let tape = Tape::new();
    let l = labelled_elbo(&model, &tape, &lab, &eps, &prior, false, None).unwrap();
    let u = unlabelled_elbo(
        &model,
        &tape,
        &unl,
        std::slice::from_ref(&eps),
        &prior,
        None,
    )
    .unwrap();
    for (a, b) in l.per_example().iter().zip(u.per_example()) {
        assert!((a.total - a.log_prior_y - a.classifier_term - b.total).abs() <= 1e-9);
        assert!(b.kl_y.abs() <= 1e-12);
    }
}

#[test]
fn one_hot_label_posterior_recovers_labelled_bound() {
    let k = 3;
    let model = toy_model(k, 5);
    let pool = toy_pool(k, 3, 6);
    let targets = [0, 4, 8];
    let own = leave_one_out(&pool, &targets);
    let lab = LabelledBatch::from_sets(&pool, &targets, &own).unwrap();
    let examples: Vec<&LabelledExample> = targets.iter().map(|&t| pool.example(t)).collect();
    let sets: Vec<Vec<Vec<usize>>> = (0..k)
        .map(|y| {
            targets
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if pool.example(t).label == y {
                        own[i].clone()
                    } else {
                        pool.class_members(y).to_vec()
                    }
                })
                .collect()
        })
        .collect();
    let unl = UnlabelledBatch::from_sets(&pool, &examples, &sets).unwrap();
    let eps_true = normal(&[3, 2], 7);
    let eps: Vec<Tensor> = (0..k).map(|_| eps_true.clone()).collect();
    let mut q = Tensor::zeros(&[3, k]);
    for (i, e) in examples.iter().enumerate() {
        q.data_mut()[i * k + e.label] = 1.0;
    }
    let prior = ClassPrior::uniform(k);
    let tape = Tape::new();
    let l = labelled_elbo(&model, &tape, &lab, &eps_true, &prior, false, None).unwrap();
    let u = unlabelled_elbo_given_posterior(
        &model,
        &tape,
        &unl,
        &eps,
        &prior,
        tape.constant(q),
        tape.constant(Tensor::zeros(&[3, k])),
    )
    .unwrap();
    for (a, b) in l.per_example().iter().zip(u.per_example()) {
        assert!(
            (a.total - b.total).abs() <= 1e-9,
            "{} vs {}",
            a.total,
            b.total
        );
        assert!((b.kl_y - (k as f64).ln()).abs() <= 1e-12);
        assert!(((a.total - a.log_prior_y) - b.total - (k as f64).ln()).abs() <= 1e-9);
    }
}

#[test]
#[allow(clippy::needless_range_loop)] // i and y index several parallel structures
fn enumeration_matches_per_class_recomputation() {
    let k = 3;
    let model = toy_model(k, 8);
    let pool = toy_pool(k, 3, 9);
    let xs = outsiders(k, 1, 10);
    let examples: Vec<&LabelledExample> = xs.iter().collect();
    let mut rng = rng::stream(11, Stream::Training);
    let unl = UnlabelledBatch::build(&pool, &examples, 3, &mut rng).unwrap();
    let eps: Vec<Tensor> = (0..k).map(|_| draw_eps(3, 2, &mut rng)).collect();
    let prior = ClassPrior::new(vec![0.5, 0.3, 0.2]).unwrap();
    let tape = Tape::new();
    let u = unlabelled_elbo(&model, &tape, &unl, &eps, &prior, None).unwrap();
    let got = u.per_example();

    let x = tape.constant(unl.images.clone());
    let log_q = model.label_log_posterior(&tape, x, None).unwrap().value();
    for i in 0..3 {
        let (mut recon, mut kl_v, mut kl_y) = (0.0, 0.0, 0.0);
        for y in 0..k {
            let sets = &unl.per_class[y];
            let start: usize = sets.set_sizes[..i].iter().sum();
            let imgs = sets.images.slice_leading(start, start + sets.set_sizes[i]);
            let t = Tape::new();
            let r = model
                .encode_invariant(&t, t.constant(imgs), &[sets.set_sizes[i]])
                .unwrap();
            let xi = t.constant(unl.images.slice_leading(i, i + 1));
            let post = model.encode_equivariant(&t, r, xi).unwrap();
            let v = reparameterize(&post, t.constant(eps[y].slice_leading(i, i + 1))).unwrap();
            let rec = reconstruction(&model, &t, r, v, xi).unwrap().item();
            let kl = kl_gaussian_to_unit(&post).unwrap().item();
            let lq = log_q.row(i)[y];
            let qy = lq.exp();
            recon += qy * rec;
            kl_v += qy * kl;
            kl_y += qy * (lq - prior.probs()[y].ln());
        }
        let total = recon - kl_v - kl_y;
        assert!(
            (got[i].total - total).abs() <= 1e-12 * total.abs(),
            "{} vs {total}",
            got[i].total
        );
        assert!((got[i].kl_y - kl_y).abs() <= 1e-12);
        assert_terms_consistent(&got[i]);
    }
}

#[test]
fn semi_objective_degenerate_and_mixed_sums() {
    let k = 2;
    let model = toy_model(k, 12);
    let pool = toy_pool(k, 3, 13);
    let targets = [0, 3];
    let lab = LabelledBatch::from_sets(&pool, &targets, &leave_one_out(&pool, &targets)).unwrap();
    let lab_eps = normal(&[2, 2], 14);
    let xs = outsiders(k, 2, 15);
    let examples: Vec<&LabelledExample> = xs.iter().collect();
    let mut rng = rng::stream(16, Stream::Training);
    let unl = UnlabelledBatch::build(&pool, &examples, 3, &mut rng).unwrap();
    let unl_eps: Vec<Tensor> = (0..k).map(|_| draw_eps(4, 2, &mut rng)).collect();
    let prior = ClassPrior::uniform(k);

    let tape = Tape::new();
    let l = labelled_elbo(&model, &tape, &lab, &lab_eps, &prior, true, None)
        .unwrap()
        .objective()
        .item();
    let u = unlabelled_elbo(&model, &tape, &unl, &unl_eps, &prior, None)
        .unwrap()
        .objective()
        .item();

    let only_lab =
        semi_supervised_objective(&model, &tape, Some((&lab, &lab_eps)), None, &prior, None)
            .unwrap();
    assert_eq!(only_lab.total.item(), l);
    assert_eq!(only_lab.examples(), 2);
    let only_unl =
        semi_supervised_objective(&model, &tape, None, Some((&unl, &unl_eps)), &prior, None)
            .unwrap();
    assert_eq!(only_unl.total.item(), u);
    let both = semi_supervised_objective(
        &model,
        &tape,
        Some((&lab, &lab_eps)),
        Some((&unl, &unl_eps)),
        &prior,
        None,
    )
    .unwrap();
    assert_eq!(both.total.item(), u + l);
    assert_eq!(both.examples(), 6);
    assert!(semi_supervised_objective(&model, &tape, None, None, &prior, None).is_err());
}

#[test]
fn per_example_terms_sum_to_dataset_objective() {
    let model = toy_model(2, 0);
    let pool = toy_pool(2, 4, 1);
    let targets: Vec<usize> = (0..8).collect();
    let sets = leave_one_out(&pool, &targets);
    let eps = normal(&[8, 2], 2);
    let prior = ClassPrior::uniform(2);
    let tape = Tape::new();
    let all = LabelledBatch::from_sets(&pool, &targets, &sets).unwrap();
    let whole = labelled_elbo(&model, &tape, &all, &eps, &prior, true, None).unwrap();
    let mut parts = 0.0;
    for i in 0..8 {
        let one = LabelledBatch::from_sets(&pool, &[i], &sets[i..i + 1]).unwrap();
        let e = labelled_elbo(
            &model,
            &tape,
            &one,
            &eps.slice_leading(i, i + 1),
            &prior,
            true,
            None,
        )
        .unwrap();
        assert_eq!(e.per_example()[0], whole.per_example()[i]);
        parts += e.per_example()[0].total;
    }
    assert!((parts - whole.objective().item()).abs() <= 1e-12 * parts.abs());
}

// ---------------------------------------------------------------------------
// Gradients

fn gradient_fixture(
    likelihood: Likelihood,
) -> (EquiVae, ClassPool, LabelledBatch, UnlabelledBatch) {
    let mut config = toy_config(3);
    config.likelihood = likelihood;
    let mut model = EquiVae::new(&config, &mut rng::stream(20, Stream::Init)).unwrap();
    jitter_biases(&mut model, 24);
    let pool = toy_pool(3, 3, 21);
    let targets = [0, 4, 8, 1];
    let lab = LabelledBatch::from_sets(&pool, &targets, &leave_one_out(&pool, &targets)).unwrap();
    let xs = outsiders(3, 1, 22);
    let examples: Vec<&LabelledExample> = xs.iter().collect();
    let unl = UnlabelledBatch::build(&pool, &examples, 3, &mut rng::stream(23, Stream::Training))
        .unwrap();
    (model, pool, lab, unl)
}

fn is_invariant(name: &str) -> bool {
    name.starts_with("invariant.")
}

/// `q(y|x)` and its log for the unlabelled batch, as constants of `model`.
fn frozen_label_posterior(model: &EquiVae, unl: &UnlabelledBatch) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let log_q = model
        .label_log_posterior(&tape, tape.constant(unl.images.clone()), None)
        .unwrap()
        .value();
    let mut q = log_q.clone();
    q.data_mut().iter_mut().for_each(|v| *v = v.exp());
    (q, log_q)
}

// The label posterior sees the invariant features through a stop-gradient,
// so invariant parameters are checked against finite differences of a
// bound in which that path is held fixed.

#[test]
fn labelled_objective_gradients() {
    for likelihood in [Likelihood::Bernoulli, Likelihood::Gaussian] {
        let (model, _, lab, _) = gradient_fixture(likelihood);
        let eps = normal(&[4, 2], 30);
        let prior = ClassPrior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let without = objective(|m, tape| {
            labelled_elbo(m, tape, &lab, &eps, &prior, false, None)
                .unwrap()
                .objective()
        });
        let with = objective(|m, tape| {
            labelled_elbo(m, tape, &lab, &eps, &prior, true, None)
                .unwrap()
                .objective()
        });
        let err = param_gradcheck(&model, H, without);
        assert!(err < 1e-3, "{likelihood:?} without classifier term: {err}");
        let err = split_gradcheck(&model, H, |n| !is_invariant(n), with, with);
        assert!(
            err < 1e-3,
            "{likelihood:?} classifier term, other parameters: {err}"
        );
        let err = split_gradcheck(&model, H, is_invariant, with, without);
        assert!(
            err < 1e-3,
            "{likelihood:?} classifier term, invariant parameters: {err}"
        );
    }
}

#[test]
fn unlabelled_objective_gradients() {
    let (model, _, _, unl) = gradient_fixture(Likelihood::Bernoulli);
    let eps: Vec<Tensor> = (0..3).map(|y| normal(&[3, 2], 40 + y)).collect();
    let prior = ClassPrior::uniform(3);
    let (q, log_q) = frozen_label_posterior(&model, &unl);
    let full = objective(|m, tape| {
        unlabelled_elbo(m, tape, &unl, &eps, &prior, None)
            .unwrap()
            .objective()
    });
    let frozen = objective(|m, tape| {
        unlabelled_elbo_given_posterior(
            m,
            tape,
            &unl,
            &eps,
            &prior,
            tape.constant(q.clone()),
            tape.constant(log_q.clone()),
        )
        .unwrap()
        .objective()
    });
    let err = split_gradcheck(&model, H, |n| !is_invariant(n), full, full);
    assert!(err < 1e-3, "other parameters: {err}");
    let err = split_gradcheck(&model, H, is_invariant, full, frozen);
    assert!(err < 1e-3, "invariant parameters: {err}");
}

#[test]
fn semi_objective_gradients() {
    let (model, _, lab, unl) = gradient_fixture(Likelihood::Bernoulli);
    let lab_eps = normal(&[4, 2], 50);
    let unl_eps: Vec<Tensor> = (0..3).map(|y| normal(&[3, 2], 51 + y)).collect();
    let prior = ClassPrior::uniform(3);
    let (q, log_q) = frozen_label_posterior(&model, &unl);
    let full = objective(|m, tape| {
        semi_supervised_objective(
            m,
            tape,
            Some((&lab, &lab_eps)),
            Some((&unl, &unl_eps)),
            &prior,
            None,
        )
        .unwrap()
        .total
    });
    let frozen = objective(|m, tape| {
        let l = labelled_elbo(m, tape, &lab, &lab_eps, &prior, false, None)
            .unwrap()
            .objective();
        let u = unlabelled_elbo_given_posterior(
            m,
            tape,
            &unl,
            &unl_eps,
            &prior,
            tape.constant(q.clone()),
            tape.constant(log_q.clone()),
        )
        .unwrap()
        .objective();
        l.add(u).unwrap()
    });
    let err = split_gradcheck(&model, H, |n| !is_invariant(n), full, full);
    assert!(err < 1e-3, "other parameters: {err}");
    let err = split_gradcheck(&model, H, is_invariant, full, frozen);
    assert!(err < 1e-3, "invariant parameters: {err}");
}

// ---------------------------------------------------------------------------
// Lower-bound property

#[test]
fn importance_weighted_evidence_exceeds_elbo() {
    let model = toy_model(2, 60);
    let pool = toy_pool(2, 3, 61);
    let (target, set) = (0usize, vec![2usize, 4]);
    let prior = ClassPrior::uniform(2);
    let x = pool.example(target).image.clone();

    let draws = 500;
    let batch =
        LabelledBatch::from_sets(&pool, &vec![target; draws], &vec![set.clone(); draws]).unwrap();
    let mut rng = rng::stream(62, Stream::Probe);
    let tape = Tape::new();
    let elbo = labelled_elbo(
        &model,
        &tape,
        &batch,
        &draw_eps(draws, 2, &mut rng),
        &prior,
        false,
        None,
    )
    .unwrap();
    let totals: Vec<f64> = elbo
        .per_example()
        .iter()
        .map(|t| t.total - t.log_prior_y)
        .collect();
    let mean = totals.iter().sum::<f64>() / draws as f64;
    let sd = (totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
    let se = sd / (draws as f64).sqrt();

    let samples = 5000;
    let tape = Tape::new();
    let set_images = Tensor::stack(
        &set.iter()
            .map(|&i| &pool.example(i).image)
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let r = model
        .encode_invariant(&tape, tape.constant(set_images), &[set.len()])
        .unwrap()
        .value();
    let (mu, sigma) = model
        .infer_posterior(&r, &Tensor::stack(&[&x]).unwrap())
        .unwrap();
    let eps = draw_eps(samples, 2, &mut rng);
    let v: Vec<f64> = (0..samples * 2)
        .map(|j| mu.data()[j % 2] + sigma.data()[j % 2] * eps.data()[j])
        .collect();
    let rs = Tensor::new(
        vec![samples, 2],
        (0..samples).flat_map(|_| r.row(0).to_vec()).collect(),
    )
    .unwrap();
    let means = model
        .infer_decode(&rs, &Tensor::new(vec![samples, 2], v.clone()).unwrap())
        .unwrap();
    let log_normal = |z: f64| -0.5 * (z * z + (2.0 * PI).ln());
    let log_w: Vec<f64> = (0..samples)
        .map(|s| {
            let ll: f64 = means
                .row(s)
                .iter()
                .zip(x.data())
                .map(|(&m, &t): (&f64, &f64)| {
                    t * m.max(LOG_GUARD).ln() + (1.0 - t) * (1.0 - m).max(LOG_GUARD).ln()
                })
                .sum();
            let (mut log_p, mut log_q) = (0.0, 0.0);
            for d in 0..2 {
                let vd = v[s * 2 + d];
                log_p += log_normal(vd);
                log_q += log_normal((vd - mu.data()[d]) / sigma.data()[d]) - sigma.data()[d].ln();
            }
            ll + log_p - log_q
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let iw = max + (log_w.iter().map(|w| (w - max).exp()).sum::<f64>() / samples as f64).ln();
    assert!(iw > mean - 3.0 * se, "IW {iw} vs ELBO {mean} ± {se}");
}
