mod common;

use common::{normal, toy_config, toy_model, unit_image, TOY_IMAGE};
use equivae::model::{reparameterize, EquiVae, Likelihood, ModelConfig};
use equivae::nn::{BackboneConfig, ImageShape, ParamGroup};
use equivae::rng::{self, Stream};
use equivae::tensor::gradcheck::check_gradients;
use equivae::{Tape, Tensor};

fn zero_group(model: &mut EquiVae, group: ParamGroup) {
    let ids: Vec<_> = model.params.in_group(group).collect();
    for id in ids {
        let shape = model.params.get(id).shape().to_vec();
        model.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
}

fn images(n: usize, seed: u64) -> Tensor {
    unit_image(&[n, 1, 2, 4], seed)
}

#[test]
fn single_image_path_matches_set_of_one() {
    let model = toy_model(2, 0);
    let x = images(3, 1);
    let tape = Tape::new();
    let via_sets = model
        .encode_invariant(&tape, tape.constant(x.clone()), &[1, 1, 1])
        .unwrap()
        .value();
    assert_eq!(via_sets, model.infer_invariant(&x).unwrap());
}

#[test]
fn invariant_latent_ignores_set_order() {
    let model = toy_model(2, 0);
    let x = images(3, 2);
    let permuted = Tensor::stack(&[
        &x.index_leading(2),
        &x.index_leading(0),
        &x.index_leading(1),
    ])
    .unwrap();
    let encode = |t: &Tensor| {
        let tape = Tape::new();
        model
            .encode_invariant(&tape, tape.constant(t.clone()), &[3])
            .unwrap()
            .value()
    };
    assert!(encode(&x).max_abs_diff(&encode(&permuted)) <= 1e-9);
}

#[test]
fn sets_in_one_batch_encode_independently() {
    let model = toy_model(2, 0);
    let x = images(5, 3);
    let tape = Tape::new();
    let joint = model
        .encode_invariant(&tape, tape.constant(x.clone()), &[2, 3])
        .unwrap()
        .value();
    let tape = Tape::new();
    let first = model
        .encode_invariant(&tape, tape.constant(x.slice_leading(0, 2)), &[2])
        .unwrap()
        .value();
    let tape = Tape::new();
    let second = model
        .encode_invariant(&tape, tape.constant(x.slice_leading(2, 5)), &[3])
        .unwrap()
        .value();
    assert_eq!(joint.row(0), first.row(0));
    assert_eq!(joint.row(1), second.row(0));
}

#[test]
fn empty_or_inconsistent_sets_are_rejected() {
    let model = toy_model(2, 0);
    let tape = Tape::new();
    assert!(model
        .encode_invariant(&tape, tape.constant(images(3, 0)), &[2, 0, 1])
        .is_err());
    assert!(model
        .encode_invariant(&tape, tape.constant(images(3, 0)), &[2])
        .is_err());
}

#[test]
fn zero_sigma_head_gives_unit_sigma() {
    let mut model = toy_model(2, 0);
    let head = model.covariant.sigma_out.clone();
    for id in [head.weight, head.bias] {
        let shape = model.params.get(id).shape().to_vec();
        model.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let (_, sigma) = model
        .infer_posterior(&normal(&[4, 2], 1), &images(4, 2))
        .unwrap();
    assert!(sigma.data().iter().all(|&s| s == 1.0));
}

#[test]
fn posterior_is_deterministic_and_checks_batch() {
    let model = toy_model(2, 0);
    let (r, x) = (normal(&[3, 2], 1), images(3, 2));
    assert_eq!(
        model.infer_posterior(&r, &x).unwrap(),
        model.infer_posterior(&r, &x).unwrap()
    );
    assert!(model.infer_posterior(&normal(&[2, 2], 1), &x).is_err());
}

#[test]
fn posterior_mean_gradient_wrt_invariant_latent() {
    let model = toy_model(2, 4);
    let x = images(3, 5);
    let err = check_gradients(&[normal(&[3, 2], 6)], 1e-5, |tape, v| {
        let post = model
            .encode_equivariant(tape, v[0], tape.constant(x.clone()))
            .unwrap();
        Ok(post.mu.square().sum())
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn reparameterisation_identities() {
    let model = toy_model(2, 0);
    let tape = Tape::new();
    let post = model
        .encode_equivariant(
            &tape,
            tape.constant(normal(&[3, 2], 1)),
            tape.constant(images(3, 2)),
        )
        .unwrap();
    let v = reparameterize(&post, tape.constant(Tensor::zeros(&[3, 2]))).unwrap();
    assert_eq!(v.value(), post.mu.value());
    assert!(reparameterize(&post, tape.constant(Tensor::zeros(&[2, 2]))).is_err());
}

#[test]
fn reparameterised_draws_have_posterior_moments() {
    let n = 1_000_000;
    let (mu, sigma) = ([0.3, -1.2], [0.5, 2.0]);
    let tape = Tape::new();
    let mus = Tensor::new(vec![n, 2], (0..n).flat_map(|_| mu).collect()).unwrap();
    let log_s = Tensor::new(
        vec![n, 2],
        (0..n).flat_map(|_| sigma.map(f64::ln)).collect(),
    )
    .unwrap();
    let half_log_var = tape.constant(log_s);
    let post = equivae::model::GaussianPosterior {
        mu: tape.constant(mus),
        half_log_var,
        sigma: half_log_var.exp(),
    };
    let v = reparameterize(&post, tape.constant(normal(&[n, 2], 9)))
        .unwrap()
        .value();
    for d in 0..2 {
        let xs: Vec<f64> = (0..n).map(|i| v.data()[i * 2 + d]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - mu[d]).abs() < 3.0 * sigma[d] / (n as f64).sqrt());
        assert!(
            (var / (sigma[d] * sigma[d]) - 1.0).abs() < 0.01,
            "variance {var}"
        );
    }
    let cov = (0..n)
        .map(|i| (v.data()[i * 2] - mu[0]) * (v.data()[i * 2 + 1] - mu[1]))
        .sum::<f64>()
        / n as f64;
    assert!(cov.abs() < 0.01 * sigma[0] * sigma[1], "covariance {cov}");
}

#[test]
fn zero_decoder_gives_half_pixels() {
    let mut model = toy_model(2, 0);
    zero_group(&mut model, ParamGroup::Decoder);
    let out = model
        .infer_decode(&normal(&[2, 2], 1), &normal(&[2, 2], 2))
        .unwrap();
    assert_eq!(out.shape(), &[2, 1, 2, 4]);
    assert!(out.data().iter().all(|&p| p == 0.5));
}

#[test]
fn decoder_output_matches_image_shape_for_both_backbones() {
    for (image, backbone) in [
        (TOY_IMAGE, BackboneConfig::Mlp { hidden: vec![6] }),
        (
            ImageShape {
                channels: 1,
                height: 7,
                width: 5,
            },
            BackboneConfig::Conv {
                filters: vec![2, 2, 3, 3, 4],
                kernel: 3,
            },
        ),
        (
            ImageShape {
                channels: 3,
                height: 8,
                width: 8,
            },
            BackboneConfig::Conv {
                filters: vec![2, 2, 3, 3, 4],
                kernel: 5,
            },
        ),
    ] {
        let mut config = toy_config(2);
        config.image = image;
        config.backbone = backbone;
        let model = EquiVae::new(&config, &mut rng::stream(0, Stream::Init)).unwrap();
        let out = model
            .infer_decode(&normal(&[3, 2], 1), &normal(&[3, 2], 2))
            .unwrap();
        assert_eq!(out.shape(), &[3, image.channels, image.height, image.width]);
        assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let x = unit_image(&[3, image.channels, image.height, image.width], 3);
        assert_eq!(model.infer_invariant(&x).unwrap().shape(), &[3, 2]);
    }
}

#[test]
fn gaussian_decoder_is_unsquashed_with_global_log_variance() {
    let mut config = toy_config(2);
    config.likelihood = Likelihood::Gaussian;
    let mut model = EquiVae::new(&config, &mut rng::stream(0, Stream::Init)).unwrap();
    let id = model.log_var.expect("gaussian model has a log variance");
    assert_eq!(model.params.get(id).shape(), &[] as &[usize]);
    zero_group(&mut model, ParamGroup::Decoder);
    let out = model
        .infer_decode(&normal(&[2, 2], 1), &normal(&[2, 2], 2))
        .unwrap();
    assert!(out.data().iter().all(|&p| p == 0.0));
}

#[test]
fn label_posterior_rows_are_distributions() {
    let model = toy_model(3, 0);
    let q = model.predict_label_posterior(&images(6, 1)).unwrap();
    assert_eq!(q.shape(), &[6, 3]);
    for i in 0..6 {
        let s: f64 = q.row(i).iter().sum();
        assert!((s - 1.0).abs() <= 1e-9);
        assert!(q.row(i).iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn zero_final_layer_gives_uniform_label_posterior() {
    let mut model = toy_model(3, 0);
    let out = model.label_posterior.as_ref().unwrap().head.output.clone();
    for id in [out.weight, out.bias] {
        let shape = model.params.get(id).shape().to_vec();
        model.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let q = model.predict_label_posterior(&images(4, 1)).unwrap();
    assert!(q.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn label_loss_never_reaches_invariant_parameters() {
    let model = toy_model(3, 0);
    let tape = Tape::new();
    let log_q = model
        .label_log_posterior(&tape, tape.constant(images(5, 1)), None)
        .unwrap();
    let grads = log_q.square().sum().backward().unwrap();
    let mut seen = 0;
    for id in model.params.in_group(ParamGroup::Invariant) {
        if let Some(g) = grads.param(id.index()) {
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "{}",
                model.params.name(id)
            );
            seen += 1;
        }
    }
    assert!(seen > 0, "invariant parameters must appear on the tape");
    let posterior_grad: f64 = model
        .params
        .in_group(ParamGroup::LabelPosterior)
        .filter_map(|id| grads.param(id.index()))
        .flat_map(|g| g.data().to_vec())
        .map(f64::abs)
        .sum();
    assert!(posterior_grad > 0.0);
}

#[test]
fn model_without_label_posterior_refuses_label_queries() {
    let mut config = toy_config(2);
    config.label_posterior = false;
    let model = EquiVae::new(&config, &mut rng::stream(0, Stream::Init)).unwrap();
    assert!(model.predict_label_posterior(&images(2, 0)).is_err());
    assert_eq!(model.params.in_group(ParamGroup::LabelPosterior).count(), 0);
}

#[test]
fn widths_halve_for_small_latents() {
    let mut config = ModelConfig::new(TOY_IMAGE, 10);
    assert_eq!((config.embed_width(), config.hidden_width()), (128, 64));
    config.latent_r = 8;
    config.latent_v = 8;
    assert_eq!((config.embed_width(), config.hidden_width()), (64, 32));
    config.latent_v = 9;
    assert_eq!((config.embed_width(), config.hidden_width()), (128, 64));
}

#[test]
fn config_validation_and_unknown_keys() {
    let mut config = ModelConfig::new(TOY_IMAGE, 2);
    config.latent_v = 0;
    assert!(config.validate().is_err());
    assert!(EquiVae::new(&config, &mut rng::stream(0, Stream::Init)).is_err());
    let json =
        r#"{"image": {"channels": 1, "height": 2, "width": 4}, "num_classes": 2, "latent_z": 3}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    let json = r#"{"image": {"channels": 1, "height": 2, "width": 4}, "num_classes": 2}"#;
    let parsed: ModelConfig = serde_json::from_str(json).unwrap();
    assert_eq!(parsed, ModelConfig::new(TOY_IMAGE, 2));
}

#[test]
fn same_seed_builds_identical_models() {
    let (a, b) = (toy_model(3, 11), toy_model(3, 11));
    for id in a.params.ids() {
        assert_eq!(a.params.get(id), b.params.get(id));
    }
    let c = toy_model(3, 12);
    assert!(a
        .params
        .ids()
        .any(|id| a.params.get(id) != c.params.get(id)));
}
