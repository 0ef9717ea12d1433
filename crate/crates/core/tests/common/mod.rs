//! Toy fixtures shared by the integration tests: 8-pixel images, a few
//! classes, two-dimensional latents.
#![allow(dead_code)]

use equivae::data::{ClassPool, LabelledExample};
use equivae::model::{EquiVae, ModelConfig};
use equivae::nn::{BackboneConfig, ImageShape};
use equivae::rng::{self, standard_normal, Stream};
use equivae::tensor::gradcheck::relative_error;
use equivae::{Tape, Tensor, Var};

pub const TOY_IMAGE: ImageShape = ImageShape {
    channels: 1,
    height: 2,
    width: 4,
};

pub fn toy_config(classes: usize) -> ModelConfig {
    let mut config = ModelConfig::new(TOY_IMAGE, classes);
    config.backbone = BackboneConfig::Mlp { hidden: vec![6] };
    config.latent_r = 2;
    config.latent_v = 2;
    config.embed_units = Some(5);
    config.hidden_units = Some(4);
    config.decoder_units = [3, 4];
    config.classifier_units = [4, 3];
    config.label_posterior = true;
    config
}

pub fn toy_model(classes: usize, seed: u64) -> EquiVae {
    EquiVae::new(&toy_config(classes), &mut rng::stream(seed, Stream::Init)).unwrap()
}

/// Gaussian values with the given shape.
pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        standard_normal(&mut rng::stream(seed, Stream::Data), n),
    )
    .unwrap()
}

/// Values strictly inside `(0, 1)`.
pub fn unit_image(shape: &[usize], seed: u64) -> Tensor {
    let mut t = normal(shape, seed);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    t
}

/// `per_class` examples of each class, ids `0..`, labels cycling.
pub fn toy_examples(classes: usize, per_class: usize, seed: u64) -> Vec<LabelledExample> {
    (0..classes * per_class)
        .map(|i| LabelledExample {
            id: i as u64,
            label: i % classes,
            image: unit_image(&TOY_IMAGE.dims(), seed * 1000 + i as u64),
        })
        .collect()
}

pub fn toy_pool(classes: usize, per_class: usize, seed: u64) -> ClassPool {
    ClassPool::new(toy_examples(classes, per_class, seed), classes).unwrap()
}

/// Relative error between backward and central differences of `f` with
/// respect to every model parameter. Unused parameters count as zero.
pub fn param_gradcheck<F>(model: &EquiVae, h: f64, f: F) -> f64
where
    F: for<'t> Fn(&EquiVae, &'t Tape) -> Var<'t>,
{
    split_gradcheck(model, h, |_| true, &f, &f)
}

/// Like [`param_gradcheck`], restricted to parameters whose name passes
/// `select`, with the backward pass taken through `analytic` and the
/// finite differences through `numeric`. Lets a caller freeze paths that
/// `analytic` blocks with a stop-gradient.
pub fn split_gradcheck<A, N>(
    model: &EquiVae,
    h: f64,
    select: impl Fn(&str) -> bool,
    analytic: A,
    numeric: N,
) -> f64
where
    A: for<'t> Fn(&EquiVae, &'t Tape) -> Var<'t>,
    N: for<'t> Fn(&EquiVae, &'t Tape) -> Var<'t>,
{
    let tape = Tape::new();
    let grads = analytic(model, &tape).backward().unwrap();
    let mut backward = Vec::new();
    let mut central = Vec::new();
    let mut probe = model.clone();
    for id in model
        .params
        .ids()
        .filter(|&id| select(model.params.name(id)))
    {
        let base = model.params.get(id).clone();
        match grads.param(id.index()) {
            Some(g) => backward.extend_from_slice(g.data()),
            None => backward.extend(std::iter::repeat_n(0.0, base.numel())),
        }
        for i in 0..base.numel() {
            let eval = |probe: &mut EquiVae, delta: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                probe.params.set(id, t).unwrap();
                let tape = Tape::new();
                numeric(probe, &tape).item()
            };
            let up = eval(&mut probe, h);
            let down = eval(&mut probe, -h);
            central.push((up - down) / (2.0 * h));
        }
        probe.params.set(id, base).unwrap();
    }
    assert!(!backward.is_empty(), "no parameter selected");
    relative_error(&backward, &central)
}

/// Pins a closure to the higher-ranked signature the gradient checks take,
/// which inference does not do for `let`-bound closures.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&EquiVae, &'t Tape) -> Var<'t>,
{
    f
}

/// Replaces every bias with small Gaussian values. Zero biases after a dead
/// layer put pre-activations exactly on the ReLU kink, where central
/// differences see half the slope.
pub fn jitter_biases(model: &mut EquiVae, seed: u64) {
    let ids: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.name(id).ends_with(".bias"))
        .collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = model.params.get(id).shape().to_vec();
        let mut t = normal(&shape, seed * 1000 + k as u64);
        t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        model.params.set(id, t).unwrap();
    }
}
