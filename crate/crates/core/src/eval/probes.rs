use super::{ClusterMeans, ImageGrid};
use crate::data::{stack_images, LabelledExample};
use crate::error::{contract, Result};
use crate::model::EquiVae;
use crate::rng::{standard_normal, Rng};
use crate::tensor::Tensor;

/// Half-width of the latent grid in prior standard deviations.
pub const DEFAULT_GRID_RANGE: f64 = 2.0;

fn check_means(model: &EquiVae, means: &ClusterMeans) -> Result<()> {
    if means.num_classes() != model.num_classes() || means.dim() != model.config().latent_r {
        return Err(contract("cluster means do not match the model"));
    }
    Ok(())
}

/// `n` rows by `K` columns: row `i` decodes `vs[i]` under every class mean.
pub fn prior_samples_from(model: &EquiVae, means: &ClusterMeans, vs: &Tensor) -> Result<ImageGrid> {
    check_means(model, means)?;
    let latent_v = model.config().latent_v;
    if vs.rank() != 2 || vs.shape()[1] != latent_v {
        return Err(contract(format!(
            "style codes must be [n×{latent_v}], got {:?}",
            vs.shape()
        )));
    }
    let (n, k) = (vs.shape()[0], model.num_classes());
    let labels: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .flat_map(|i| (0..k).map(move |_| vs.row(i).to_vec()))
        .collect();
    let cells = model.infer_decode(&means.rows(&labels), &Tensor::from_rows(&rows)?)?;
    ImageGrid::new(n, k, cells)
}

/// Samples `n` style codes from the unit-normal prior and decodes each under
/// every class mean.
pub fn generate_prior_samples(
    model: &EquiVae,
    means: &ClusterMeans,
    n: usize,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    if n == 0 {
        return Err(contract("need at least one sample per class"));
    }
    let latent_v = model.config().latent_v;
    let vs = Tensor::new(vec![n, latent_v], standard_normal(rng, n * latent_v))?;
    prior_samples_from(model, means, &vs)
}

/// Posterior means of `examples` given their class means.
fn posterior_means(
    model: &EquiVae,
    means: &ClusterMeans,
    examples: &[&LabelledExample],
) -> Result<Tensor> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    if let Some(&y) = labels.iter().find(|&&y| y >= means.num_classes()) {
        return Err(contract(format!("label {y} has no cluster mean")));
    }
    let images = stack_images(examples.iter().copied()).ok_or_else(|| contract("no examples"))?;
    Ok(model.infer_posterior(&means.rows(&labels), &images)?.0)
}

/// Decodes the straight path between the posterior means of two same-class
/// examples at `steps` evenly spaced points, endpoints included.
pub fn interpolate(
    model: &EquiVae,
    means: &ClusterMeans,
    a: &LabelledExample,
    b: &LabelledExample,
    steps: usize,
) -> Result<ImageGrid> {
    check_means(model, means)?;
    if a.label != b.label {
        return Err(contract(format!(
            "interpolation endpoints have classes {} and {}",
            a.label, b.label
        )));
    }
    if steps < 2 {
        return Err(contract("interpolation needs at least two steps"));
    }
    let mu = posterior_means(model, means, &[a, b])?;
    let (mu_a, mu_b) = (mu.row(0), mu.row(1));
    let rows: Vec<Vec<f64>> = (0..steps)
        .map(|s| {
            let t = s as f64 / (steps - 1) as f64;
            mu_a.iter()
                .zip(mu_b)
                .map(|(p, q)| (1.0 - t) * p + t * q)
                .collect()
        })
        .collect();
    let cells = model.infer_decode(
        &means.rows(&vec![a.label; steps]),
        &Tensor::from_rows(&rows)?,
    )?;
    ImageGrid::new(1, steps, cells)
}

/// Decodes each example from its class mean and its own posterior mean.
pub fn reconstruct(
    model: &EquiVae,
    means: &ClusterMeans,
    examples: &[&LabelledExample],
) -> Result<Tensor> {
    check_means(model, means)?;
    let mu = posterior_means(model, means, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    model.infer_decode(&means.rows(&labels), &mu)
}

/// `K×K` grid: cell `(i, j)` decodes class mean `i` with the posterior mean
/// of the class-`j` example. `examples` must hold each class exactly once.
pub fn style_transfer_grid(
    model: &EquiVae,
    means: &ClusterMeans,
    examples: &[&LabelledExample],
) -> Result<ImageGrid> {
    check_means(model, means)?;
    let k = model.num_classes();
    let mut by_class: Vec<Option<&LabelledExample>> = vec![None; k];
    for &e in examples {
        let slot = by_class
            .get_mut(e.label)
            .ok_or_else(|| contract(format!("label {} out of range", e.label)))?;
        if slot.replace(e).is_some() {
            return Err(contract(format!("class {} given twice", e.label)));
        }
    }
    let ordered: Vec<&LabelledExample> = by_class
        .iter()
        .enumerate()
        .map(|(y, e)| e.ok_or_else(|| contract(format!("no example for class {y}"))))
        .collect::<Result<_>>()?;
    let styles = posterior_means(model, means, &ordered)?;
    let labels: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let rows: Vec<Vec<f64>> = (0..k)
        .flat_map(|_| (0..k).map(|j| styles.row(j).to_vec()))
        .collect();
    let cells = model.infer_decode(&means.rows(&labels), &Tensor::from_rows(&rows)?)?;
    ImageGrid::new(k, k, cells)
}

/// Decodes class `y` over a `resolution × resolution` grid of style codes.
/// Cell `(i, j)` uses `v = (−range + iΔ, −range + jΔ)` with
/// `Δ = 2·range / (resolution − 1)`; a single cell sits at the origin.
pub fn latent_grid(
    model: &EquiVae,
    means: &ClusterMeans,
    y: usize,
    range: f64,
    resolution: usize,
) -> Result<ImageGrid> {
    check_means(model, means)?;
    if model.config().latent_v != 2 {
        return Err(contract(format!(
            "latent grid needs a 2-dimensional style latent, model has {}",
            model.config().latent_v
        )));
    }
    if y >= model.num_classes() {
        return Err(contract(format!("class {y} out of range")));
    }
    if resolution == 0 || !range.is_finite() || range <= 0.0 {
        return Err(contract(
            "latent grid needs resolution ≥ 1 and a positive finite range",
        ));
    }
    let coord = |i: usize| {
        if resolution == 1 {
            0.0
        } else {
            -range + i as f64 * (2.0 * range / (resolution - 1) as f64)
        }
    };
    let rows: Vec<Vec<f64>> = (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| vec![coord(i), coord(j)]))
        .collect();
    let cells = model.infer_decode(
        &means.rows(&vec![y; rows.len()]),
        &Tensor::from_rows(&rows)?,
    )?;
    ImageGrid::new(resolution, resolution, cells)
}
