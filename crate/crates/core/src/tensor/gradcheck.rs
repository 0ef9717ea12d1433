//! Central finite differences for checking backward rules.

use super::{Tape, Tensor, TensorError, Var};

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of a scalar function of `x`.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Relative error between backward and finite differences for a scalar
/// function of several inputs, checked jointly over all of them.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = loss.backward()?;
    let mut analytic = Vec::new();
    for v in &vars {
        analytic.extend_from_slice(grads.wrt(*v).expect("leaf gradient").data());
    }

    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward already succeeded").item()
    };
    let mut numeric = Vec::new();
    let mut current = inputs.to_vec();
    for i in 0..inputs.len() {
        let g = numerical_gradient(
            |x| {
                current[i] = x.clone();
                eval(&current)
            },
            &inputs[i],
            h,
        );
        current[i] = inputs[i].clone();
        numeric.extend_from_slice(g.data());
    }
    Ok(relative_error(&analytic, &numeric))
}
