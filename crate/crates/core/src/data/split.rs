use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, LabelledExample};
use crate::error::{contract, Result};
use crate::rng::Rng;

/// Stratified labelled subset: `n_labelled / K` per class, the remainder
/// going one each to the lowest class indices. Everything else becomes
/// unlabelled. Both outputs keep the input order.
pub fn make_semi_split(
    examples: &[LabelledExample],
    n_labelled: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<DatasetSplit> {
    if n_labelled < 2 * num_classes {
        return Err(contract(format!(
            "n_labelled = {n_labelled} is below the minimum of two per class ({})",
            2 * num_classes
        )));
    }
    if n_labelled > examples.len() {
        return Err(contract(format!(
            "n_labelled = {n_labelled} exceeds the {} available examples",
            examples.len()
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, e) in examples.iter().enumerate() {
        by_class
            .get_mut(e.label)
            .ok_or_else(|| contract(format!("label {} out of range", e.label)))?
            .push(i);
    }
    let (base, extra) = (n_labelled / num_classes, n_labelled % num_classes);
    let mut chosen = vec![false; examples.len()];
    for (y, members) in by_class.iter_mut().enumerate() {
        let quota = base + usize::from(y < extra);
        if members.len() < quota {
            return Err(contract(format!(
                "class {y} has {} examples, {quota} requested",
                members.len()
            )));
        }
        members.shuffle(rng);
        members[..quota].iter().for_each(|&i| chosen[i] = true);
    }
    let (labelled, unlabelled): (Vec<_>, Vec<_>) =
        examples.iter().zip(&chosen).partition(|(_, &c)| c);
    Ok(DatasetSplit {
        train_labelled: labelled.into_iter().map(|(e, _)| e.clone()).collect(),
        train_unlabelled: unlabelled.into_iter().map(|(e, _)| e.clone()).collect(),
        validation: Vec::new(),
        test: Vec::new(),
    })
}

const CONSTANT_TOLERANCE: f64 = 1e-12;

/// Per-pixel standardisation to zero mean and unit deviation. Pixels that
/// are constant over the fitting set are only centred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(examples: &[LabelledExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| contract("cannot standardise an empty dataset"))?;
        let p = first.image.numel();
        let n = examples.len() as f64;
        let mut mean = vec![0.0; p];
        for e in examples {
            mean.iter_mut()
                .zip(e.image.data())
                .for_each(|(m, &x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for e in examples {
            for ((v, &x), &m) in var.iter_mut().zip(e.image.data()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        // rounding in the mean leaves a residue of order ulp(mean) on
        // constant pixels; those are centred on their exact value instead
        let mut std = Vec::with_capacity(p);
        for (i, (v, m)) in var.iter().zip(mean.iter_mut()).enumerate() {
            let s = (v / n).sqrt();
            if s <= CONSTANT_TOLERANCE * m.abs().max(1.0) {
                *m = first.image.data()[i];
                std.push(0.0);
            } else {
                std.push(s);
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, examples: &mut [LabelledExample]) {
        for e in examples {
            let data = e.image.data_mut();
            for ((x, &m), &s) in data.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = if s > 0.0 { (*x - m) / s } else { *x - m };
            }
        }
    }
}
