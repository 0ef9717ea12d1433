use rand::Rng as _;

use super::store::{ParamGroup, ParamId, ParameterStore};
use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite by construction")
}

/// Fully connected layer, `x·W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = glorot_uniform(&[inputs, outputs], inputs, outputs, rng);
        let weight = store.register(format!("{name}.weight"), group, w)?;
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(&[outputs]))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        Ok(x.matmul(w)?.add(b)?)
    }
}

/// Same-padded 2-d convolution; kernel `[out × in × k × k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = glorot_uniform(
            &[out_channels, in_channels, k, k],
            in_channels * k * k,
            out_channels * k * k,
            rng,
        );
        let kernel = store.register(format!("{name}.kernel"), group, w)?;
        let bias = store.register(
            format!("{name}.bias"),
            group,
            Tensor::zeros(&[out_channels]),
        )?;
        Ok(Self {
            kernel,
            bias,
            stride,
        })
    }

    pub fn forward<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let k = store.var(tape, self.kernel);
        let b = store.var(tape, self.bias);
        Ok(x.conv2d(k, Some(b), self.stride)?)
    }
}

/// Transposed convolution; kernel `[in × out × k × k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub output_hw: (usize, usize),
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        output_hw: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = glorot_uniform(
            &[in_channels, out_channels, k, k],
            in_channels * k * k,
            out_channels * k * k,
            rng,
        );
        let kernel = store.register(format!("{name}.kernel"), group, w)?;
        let bias = store.register(
            format!("{name}.bias"),
            group,
            Tensor::zeros(&[out_channels]),
        )?;
        Ok(Self {
            kernel,
            bias,
            stride,
            output_hw,
        })
    }

    pub fn forward<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let k = store.var(tape, self.kernel);
        let b = store.var(tape, self.bias);
        Ok(x.conv_transpose2d(k, Some(b), self.stride, Some(self.output_hw))?)
    }
}

/// Inverted dropout. `rng = None` means inference and returns `x` untouched.
pub fn dropout<'t>(x: Var<'t>, rate: f64, rng: Option<&mut Rng>) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(contract(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = x.shape();
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let mask = x.tape().constant(Tensor::new(shape, mask)?);
    Ok(x.mul(mask)?)
}

/// ReLU dense stack with dropout after every hidden layer, then a linear
/// output layer. With `dropout_input` the input is dropped out as well.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub hidden: Vec<Dense>,
    pub output: Dense,
    pub rate: f64,
    pub dropout_input: bool,
}

impl MlpHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        widths: &[usize],
        outputs: usize,
        rate: f64,
        dropout_input: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut width = inputs;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Dense::new(
                store,
                &format!("{name}.hidden{i}"),
                group,
                width,
                w,
                rng,
            )?);
            width = w;
        }
        let output = Dense::new(store, &format!("{name}.out"), group, width, outputs, rng)?;
        Ok(Self {
            hidden,
            output,
            rate,
            dropout_input,
        })
    }

    pub fn forward<'t>(
        &self,
        store: &ParameterStore,
        tape: &'t Tape,
        x: Var<'t>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var<'t>> {
        let mut h = x;
        if self.dropout_input {
            h = dropout(h, self.rate, rng.as_deref_mut())?;
        }
        for layer in &self.hidden {
            h = layer.forward(store, tape, h)?.relu();
            h = dropout(h, self.rate, rng.as_deref_mut())?;
        }
        self.output.forward(store, tape, h)
    }
}
