//! The four networks and their wiring: invariant encoder, equivariant
//! posterior, decoder and label posterior.

mod classifier;
mod config;

pub use classifier::{BenchmarkClassifier, EmbeddingClassifier};
pub use config::{Likelihood, ModelConfig};

use crate::error::{contract, Result};
use crate::nn::{
    BackboneConfig, ConvTranspose2d, Dense, ImageEncoder, MlpHead, ParamGroup, ParamId,
    ParameterStore,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Diagonal Gaussian `N(mu, sigma²)` over the equivariant latent.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior<'t> {
    pub mu: Var<'t>,
    /// `log sigma`
    pub half_log_var: Var<'t>,
    pub sigma: Var<'t>,
}

/// `mu + sigma * eps`
pub fn reparameterize<'t>(post: &GaussianPosterior<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    Ok(post.mu.add(post.sigma.mul(eps)?)?)
}

#[derive(Debug, Clone)]
pub struct InvariantEncoder {
    pub embed: ImageEncoder,
    pub hidden: Dense,
    pub out: Dense,
}

impl InvariantEncoder {
    /// Mean-pools embeddings over consecutive groups of `set_sizes` images,
    /// then maps each pooled vector to the invariant latent.
    pub fn forward<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        images: Var<'t>,
        set_sizes: &[usize],
    ) -> Result<Var<'t>> {
        if set_sizes.is_empty() || set_sizes.contains(&0) {
            return Err(contract("every complementary set needs at least one image"));
        }
        let e = self.embed.forward(store, tape, images)?;
        let pooled = e.segment_mean(set_sizes)?;
        let h = self.hidden.forward(store, tape, pooled)?.relu();
        self.out.forward(store, tape, h)
    }
}

#[derive(Debug, Clone)]
pub struct CovariantEncoder {
    pub embed: ImageEncoder,
    pub from_r: Dense,
    pub mu_hidden: Dense,
    pub mu_out: Dense,
    pub sigma_hidden: Dense,
    pub sigma_out: Dense,
}

impl CovariantEncoder {
    /// Posterior from a precomputed image embedding, so the embedding can be
    /// shared across candidate classes.
    pub fn from_embedding<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        embedding: Var<'t>,
        r: Var<'t>,
    ) -> Result<GaussianPosterior<'t>> {
        let (eb, rb) = (embedding.shape()[0], r.shape()[0]);
        if eb != rb {
            return Err(contract(format!(
                "batch mismatch: {rb} invariant latents for {eb} images"
            )));
        }
        let tr = self.from_r.forward(store, tape, r)?.relu();
        let joint = Var::concat_cols(&[embedding, tr])?;
        let mu_h = self.mu_hidden.forward(store, tape, joint)?.relu();
        let mu = self.mu_out.forward(store, tape, mu_h)?;
        let s_h = self.sigma_hidden.forward(store, tape, joint)?.relu();
        let half_log_var = self.sigma_out.forward(store, tape, s_h)?;
        Ok(GaussianPosterior {
            mu,
            half_log_var,
            sigma: half_log_var.exp(),
        })
    }
}

#[derive(Debug, Clone)]
enum DecoderBody {
    Mlp {
        layers: Vec<Dense>,
        out: Dense,
    },
    Conv {
        project: Dense,
        map: [usize; 3],
        layers: Vec<ConvTranspose2d>,
    },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub from_r: Dense,
    pub from_v: Dense,
    pub joint: Dense,
    body: DecoderBody,
}

impl Decoder {
    /// Pixel means before the output nonlinearity, `[B×C×H×W]`.
    pub fn logits<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        r: Var<'t>,
        v: Var<'t>,
    ) -> Result<Var<'t>> {
        let (rb, vb) = (r.shape()[0], v.shape()[0]);
        if rb != vb {
            return Err(contract(format!(
                "batch mismatch: {rb} invariant vs {vb} equivariant latents"
            )));
        }
        let hr = self.from_r.forward(store, tape, r)?.relu();
        let hv = self.from_v.forward(store, tape, v)?.relu();
        let mut h = self
            .joint
            .forward(store, tape, Var::concat_cols(&[hr, hv])?)?
            .relu();
        match &self.body {
            DecoderBody::Mlp { layers, out } => {
                for layer in layers {
                    h = layer.forward(store, tape, h)?.relu();
                }
                Ok(out.forward(store, tape, h)?)
            }
            DecoderBody::Conv {
                project,
                map,
                layers,
            } => {
                h = project.forward(store, tape, h)?.relu();
                h = h.reshape(&[rb, map[0], map[1], map[2]])?;
                let last = layers.len() - 1;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(store, tape, h)?;
                    if i != last {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Image embedding joined with the frozen invariant latent, then a dropout
/// head over the classes.
#[derive(Debug, Clone)]
pub struct LabelPosteriorNet {
    pub embed: ImageEncoder,
    pub head: MlpHead,
}

/// The full generative model with its inference networks.
#[derive(Debug, Clone)]
pub struct EquiVae {
    config: ModelConfig,
    pub params: ParameterStore,
    pub invariant: InvariantEncoder,
    pub covariant: CovariantEncoder,
    pub decoder: Decoder,
    pub label_posterior: Option<LabelPosteriorNet>,
    /// Global pixel log-variance, Gaussian likelihood only.
    pub log_var: Option<ParamId>,
}

impl EquiVae {
    /// Builds and initialises every network. Parameters are drawn in a fixed
    /// order, so the same `rng` state gives bit-identical weights.
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let mut store = ParameterStore::new();
        let s = &mut store;
        let (embed, hidden) = (config.embed_width(), config.hidden_width());
        let [dec_latent, dec_joint] = config.decoder_units;
        let image = config.image;
        let backbone = &config.backbone;

        use ParamGroup::*;
        let invariant = InvariantEncoder {
            embed: ImageEncoder::new(s, "invariant.embed", Invariant, backbone, image, embed, rng)?,
            hidden: Dense::new(s, "invariant.hidden", Invariant, embed, hidden, rng)?,
            out: Dense::new(s, "invariant.out", Invariant, hidden, config.latent_r, rng)?,
        };
        let covariant = CovariantEncoder {
            embed: ImageEncoder::new(s, "covariant.embed", Covariant, backbone, image, embed, rng)?,
            from_r: Dense::new(
                s,
                "covariant.from_r",
                Covariant,
                config.latent_r,
                hidden,
                rng,
            )?,
            mu_hidden: Dense::new(
                s,
                "covariant.mu_hidden",
                Covariant,
                embed + hidden,
                hidden,
                rng,
            )?,
            mu_out: Dense::new(
                s,
                "covariant.mu_out",
                Covariant,
                hidden,
                config.latent_v,
                rng,
            )?,
            sigma_hidden: Dense::new(
                s,
                "covariant.sigma_hidden",
                Covariant,
                embed + hidden,
                hidden,
                rng,
            )?,
            sigma_out: Dense::new(
                s,
                "covariant.sigma_out",
                Covariant,
                hidden,
                config.latent_v,
                rng,
            )?,
        };
        let from_r = Dense::new(
            s,
            "decoder.from_r",
            Decoder,
            config.latent_r,
            dec_latent,
            rng,
        )?;
        let from_v = Dense::new(
            s,
            "decoder.from_v",
            Decoder,
            config.latent_v,
            dec_latent,
            rng,
        )?;
        let joint = Dense::new(s, "decoder.joint", Decoder, 2 * dec_latent, dec_joint, rng)?;
        let body = match backbone {
            BackboneConfig::Mlp { hidden: widths } => {
                let mut layers = Vec::new();
                let mut width = dec_joint;
                for (i, &w) in widths.iter().rev().enumerate() {
                    layers.push(Dense::new(
                        s,
                        &format!("decoder.mlp{i}"),
                        Decoder,
                        width,
                        w,
                        rng,
                    )?);
                    width = w;
                }
                let out = Dense::new(s, "decoder.out", Decoder, width, image.pixels(), rng)?;
                DecoderBody::Mlp { layers, out }
            }
            BackboneConfig::Conv { filters, kernel } => {
                let extents = BackboneConfig::conv_extents(image, *kernel);
                let strides = BackboneConfig::strides();
                let (h, w) = extents[strides.len()];
                let map = [filters[strides.len() - 1], h, w];
                let project = Dense::new(
                    s,
                    "decoder.project",
                    Decoder,
                    dec_joint,
                    map.iter().product(),
                    rng,
                )?;
                let mut layers = Vec::new();
                let mut channels = map[0];
                for layer in (0..strides.len()).rev() {
                    let out_c = if layer == 0 {
                        image.channels
                    } else {
                        filters[layer - 1]
                    };
                    layers.push(ConvTranspose2d::new(
                        s,
                        &format!("decoder.tconv{}", strides.len() - 1 - layer),
                        Decoder,
                        channels,
                        out_c,
                        *kernel,
                        strides[layer],
                        extents[layer],
                        rng,
                    )?);
                    channels = out_c;
                }
                DecoderBody::Conv {
                    project,
                    map,
                    layers,
                }
            }
        };
        let decoder = self::Decoder {
            from_r,
            from_v,
            joint,
            body,
        };
        let label_posterior = if config.label_posterior {
            let embed_net = ImageEncoder::new(
                s,
                "label_posterior.embed",
                LabelPosterior,
                backbone,
                image,
                embed,
                rng,
            )?;
            let head = MlpHead::new(
                s,
                "label_posterior.head",
                LabelPosterior,
                embed + config.latent_r,
                &config.classifier_units,
                config.num_classes,
                config.dropout,
                false,
                rng,
            )?;
            Some(LabelPosteriorNet {
                embed: embed_net,
                head,
            })
        } else {
            None
        };
        let log_var = match config.likelihood {
            Likelihood::Gaussian => {
                Some(s.register("decoder.log_var", Decoder, Tensor::scalar(0.0))?)
            }
            Likelihood::Bernoulli => None,
        };
        Ok(Self {
            config,
            params: store,
            invariant,
            covariant,
            decoder,
            label_posterior,
            log_var,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Invariant latent of each complementary set. `images` holds the sets
    /// back to back, `set_sizes` their lengths.
    pub fn encode_invariant<'t>(
        &self,
        tape: &'t Tape,
        images: Var<'t>,
        set_sizes: &[usize],
    ) -> Result<Var<'t>> {
        self.invariant
            .forward(&self.params, tape, images, set_sizes)
    }

    /// Single-image invariant embedding, one row per image.
    pub fn invariant_features<'t>(&self, tape: &'t Tape, images: Var<'t>) -> Result<Var<'t>> {
        let n = images.shape()[0];
        self.encode_invariant(tape, images, &vec![1; n])
    }

    pub fn covariant_embedding<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.covariant.embed.forward(&self.params, tape, x)
    }

    pub fn posterior_from_embedding<'t>(
        &self,
        tape: &'t Tape,
        embedding: Var<'t>,
        r: Var<'t>,
    ) -> Result<GaussianPosterior<'t>> {
        self.covariant
            .from_embedding(&self.params, tape, embedding, r)
    }

    pub fn encode_equivariant<'t>(
        &self,
        tape: &'t Tape,
        r: Var<'t>,
        x: Var<'t>,
    ) -> Result<GaussianPosterior<'t>> {
        let e = self.covariant_embedding(tape, x)?;
        self.posterior_from_embedding(tape, e, r)
    }

    /// Decoder output before the likelihood's link function.
    pub fn decode_logits<'t>(&self, tape: &'t Tape, r: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let out = self.decoder.logits(&self.params, tape, r, v)?;
        let b = out.shape()[0];
        let img = self.config.image;
        Ok(out.reshape(&[b, img.channels, img.height, img.width])?)
    }

    /// Pixel means: sigmoid of the logits (Bernoulli) or the raw output (Gaussian).
    pub fn decode<'t>(&self, tape: &'t Tape, r: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let logits = self.decode_logits(tape, r, v)?;
        Ok(match self.config.likelihood {
            Likelihood::Bernoulli => logits.sigmoid(),
            Likelihood::Gaussian => logits,
        })
    }

    fn label_net(&self) -> Result<&LabelPosteriorNet> {
        self.label_posterior
            .as_ref()
            .ok_or_else(|| contract("model was built without a label posterior"))
    }

    /// `log q(y|x)`, `[B×K]`. The invariant embedding enters through a stop-gradient.
    pub fn label_log_posterior<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        rng: Option<&mut Rng>,
    ) -> Result<Var<'t>> {
        let net = self.label_net()?;
        let frozen = self.invariant_features(tape, x)?.stop_gradient();
        let e = net.embed.forward(&self.params, tape, x)?;
        let joint = Var::concat_cols(&[e, frozen])?;
        let logits = net.head.forward(&self.params, tape, joint, rng)?;
        Ok(logits.log_softmax()?)
    }

    /// Inference-mode `q(y|x)` as plain probabilities.
    pub fn predict_label_posterior(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let lp = self.label_log_posterior(&tape, tape.constant(images.clone()), None)?;
        Ok(lp.exp().value())
    }

    /// Single-image invariant embeddings for a stack of images.
    pub fn infer_invariant(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self
            .invariant_features(&tape, tape.constant(images.clone()))?
            .value())
    }

    /// Posterior means and standard deviations given invariant latents.
    pub fn infer_posterior(&self, r: &Tensor, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let post = self.encode_equivariant(
            &tape,
            tape.constant(r.clone()),
            tape.constant(images.clone()),
        )?;
        Ok((post.mu.value(), post.sigma.value()))
    }

    pub fn infer_decode(&self, r: &Tensor, v: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self
            .decode(&tape, tape.constant(r.clone()), tape.constant(v.clone()))?
            .value())
    }
}
