use rand::Rng as _;

use super::pool::{sample_complementary, ClassPool};
use super::{stack_images, LabelledExample};
use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn draw_m(m_max: usize, rng: &mut Rng) -> Result<usize> {
    if m_max == 0 {
        return Err(contract("m_max must be at least 1"));
    }
    Ok(rng.random_range(1..=m_max))
}

/// Complementary sets for a batch, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplementarySets {
    pub ids: Vec<Vec<u64>>,
    /// `[Σm × C×H×W]`
    pub images: Tensor,
    pub set_sizes: Vec<usize>,
}

impl ComplementarySets {
    fn gather(pool: &ClassPool, picks: &[Vec<usize>]) -> Self {
        let members: Vec<&LabelledExample> =
            picks.iter().flatten().map(|&i| pool.example(i)).collect();
        Self {
            ids: picks
                .iter()
                .map(|p| p.iter().map(|&i| pool.example(i).id).collect())
                .collect(),
            images: stack_images(members).expect("sets are non-empty"),
            set_sizes: picks.iter().map(Vec::len).collect(),
        }
    }
}

/// Labelled targets with their own-class complementary sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledBatch {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    /// `[B×C×H×W]`
    pub images: Tensor,
    pub complementary_ids: Vec<Vec<u64>>,
    /// `[Σm × C×H×W]`
    pub complementary: Tensor,
    pub set_sizes: Vec<usize>,
}

impl LabelledBatch {
    /// Batch over the pool members at `targets`. For each target `m` is
    /// drawn uniformly from `1..=m_max`, then its complementary set excludes
    /// the target itself.
    pub fn build(pool: &ClassPool, targets: &[usize], m_max: usize, rng: &mut Rng) -> Result<Self> {
        if targets.is_empty() {
            return Err(contract("batch size must be at least 1"));
        }
        let mut picks = Vec::with_capacity(targets.len());
        for &t in targets {
            let e = pool.example(t);
            let m = draw_m(m_max, rng)?;
            picks.push(sample_complementary(pool, e.label, Some(e.id), m, rng)?);
        }
        Ok(Self::assemble(pool, targets, &picks))
    }

    /// Batch with caller-chosen complementary sets (pool indices).
    pub fn from_sets(pool: &ClassPool, targets: &[usize], sets: &[Vec<usize>]) -> Result<Self> {
        if targets.is_empty() || targets.len() != sets.len() || sets.iter().any(Vec::is_empty) {
            return Err(contract("need one non-empty complementary set per target"));
        }
        Ok(Self::assemble(pool, targets, sets))
    }

    fn assemble(pool: &ClassPool, targets: &[usize], picks: &[Vec<usize>]) -> Self {
        let sets = ComplementarySets::gather(pool, picks);
        let examples: Vec<&LabelledExample> = targets.iter().map(|&t| pool.example(t)).collect();
        Self {
            ids: examples.iter().map(|e| e.id).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            images: stack_images(examples.iter().copied()).expect("non-empty batch"),
            complementary_ids: sets.ids,
            complementary: sets.images,
            set_sizes: sets.set_sizes,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unlabelled targets with one complementary set per candidate class.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledBatch {
    pub ids: Vec<u64>,
    pub images: Tensor,
    /// Indexed by class.
    pub per_class: Vec<ComplementarySets>,
}

impl UnlabelledBatch {
    /// `m` is drawn once per example and shared by all its class sets. The
    /// target is not in the labelled pool, so nothing is excluded.
    pub fn build(
        pool: &ClassPool,
        examples: &[&LabelledExample],
        m_max: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(contract("batch size must be at least 1"));
        }
        let ms = examples
            .iter()
            .map(|_| draw_m(m_max, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut per_class = Vec::with_capacity(pool.num_classes());
        for y in 0..pool.num_classes() {
            let picks = ms
                .iter()
                .map(|&m| sample_complementary(pool, y, None, m, rng))
                .collect::<Result<Vec<_>>>()?;
            per_class.push(ComplementarySets::gather(pool, &picks));
        }
        Ok(Self {
            ids: examples.iter().map(|e| e.id).collect(),
            images: stack_images(examples.iter().copied()).expect("non-empty batch"),
            per_class,
        })
    }

    /// Batch with caller-chosen sets: `sets[y][i]` are pool indices for example `i`, class `y`.
    pub fn from_sets(
        pool: &ClassPool,
        examples: &[&LabelledExample],
        sets: &[Vec<Vec<usize>>],
    ) -> Result<Self> {
        if examples.is_empty()
            || sets.len() != pool.num_classes()
            || sets
                .iter()
                .any(|s| s.len() != examples.len() || s.iter().any(Vec::is_empty))
        {
            return Err(contract("need one non-empty set per example and class"));
        }
        Ok(Self {
            ids: examples.iter().map(|e| e.id).collect(),
            images: stack_images(examples.iter().copied()).expect("non-empty batch"),
            per_class: sets
                .iter()
                .map(|s| ComplementarySets::gather(pool, s))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
