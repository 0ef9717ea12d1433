use super::ModelConfig;
use crate::error::Result;
use crate::nn::{ImageEncoder, MlpHead, ParamGroup, ParameterStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// End-to-end classifier shaped like the invariant encoder, with dropout
/// after each of its two dense layers.
#[derive(Debug, Clone)]
pub struct BenchmarkClassifier {
    pub params: ParameterStore,
    embed: ImageEncoder,
    head: MlpHead,
}

impl BenchmarkClassifier {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let group = ParamGroup::Classifier;
        let embed = ImageEncoder::new(
            &mut params,
            "classifier.embed",
            group,
            &config.backbone,
            config.image,
            config.embed_width(),
            rng,
        )?;
        let head = MlpHead::new(
            &mut params,
            "classifier.head",
            group,
            config.embed_width(),
            &[config.hidden_width()],
            config.num_classes,
            config.dropout,
            true,
            rng,
        )?;
        Ok(Self {
            params,
            embed,
            head,
        })
    }

    /// Class log-probabilities `[B×K]`; dropout is active iff `rng` is given.
    pub fn log_probs<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        rng: Option<&mut Rng>,
    ) -> Result<Var<'t>> {
        let e = self.embed.forward(&self.params, tape, x)?;
        Ok(self
            .head
            .forward(&self.params, tape, e, rng)?
            .log_softmax()?)
    }
}

/// Dropout head over fixed feature vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingClassifier {
    pub params: ParameterStore,
    head: MlpHead,
}

impl EmbeddingClassifier {
    pub fn new(
        inputs: usize,
        widths: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut params = ParameterStore::new();
        let head = MlpHead::new(
            &mut params,
            "embedding_classifier",
            ParamGroup::Classifier,
            inputs,
            widths,
            classes,
            dropout,
            false,
            rng,
        )?;
        Ok(Self { params, head })
    }

    pub fn log_probs<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        rng: Option<&mut Rng>,
    ) -> Result<Var<'t>> {
        Ok(self
            .head
            .forward(&self.params, tape, x, rng)?
            .log_softmax()?)
    }
}
