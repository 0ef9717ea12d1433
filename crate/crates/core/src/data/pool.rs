use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;

use super::LabelledExample;
use crate::error::{contract, Result};
use crate::rng::Rng;

/// Labelled examples indexed by class.
#[derive(Debug, Clone)]
pub struct ClassPool {
    examples: Vec<LabelledExample>,
    by_class: Vec<Vec<usize>>,
    by_id: HashMap<u64, usize>,
}

impl ClassPool {
    /// Training pool: every class must hold at least two examples, so each
    /// one has a non-empty complement.
    pub fn new(examples: Vec<LabelledExample>, num_classes: usize) -> Result<Self> {
        Self::with_minimum(examples, num_classes, 2)
    }

    pub fn with_minimum(
        examples: Vec<LabelledExample>,
        num_classes: usize,
        minimum: usize,
    ) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, e) in examples.iter().enumerate() {
            let slot = by_class.get_mut(e.label).ok_or_else(|| {
                contract(format!(
                    "label {} out of range for {num_classes} classes",
                    e.label
                ))
            })?;
            slot.push(i);
            if by_id.insert(e.id, i).is_some() {
                return Err(contract(format!("duplicate example id {}", e.id)));
            }
        }
        for (y, members) in by_class.iter().enumerate() {
            if members.len() < minimum {
                return Err(contract(format!(
                    "class {y} has {} labelled examples, needs at least {minimum}",
                    members.len()
                )));
            }
        }
        Ok(Self {
            examples,
            by_class,
            by_id,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn examples(&self) -> &[LabelledExample] {
        &self.examples
    }

    pub fn example(&self, index: usize) -> &LabelledExample {
        &self.examples[index]
    }

    /// Indices of the members of class `y`, in insertion order.
    pub fn class_members(&self, y: usize) -> &[usize] {
        &self.by_class[y]
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Draws `m` members of class `label`, never `exclude_id`. Without
/// replacement when enough candidates remain, with replacement otherwise.
/// Returns pool indices.
pub fn sample_complementary(
    pool: &ClassPool,
    label: usize,
    exclude_id: Option<u64>,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(contract("complementary set size must be at least 1"));
    }
    let members = pool
        .by_class
        .get(label)
        .ok_or_else(|| contract(format!("no class {label} in pool")))?;
    let candidates: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&i| Some(pool.examples[i].id) != exclude_id)
        .collect();
    if candidates.is_empty() {
        return Err(contract(format!(
            "class {label} has no complementary candidates"
        )));
    }
    Ok(if m <= candidates.len() {
        index::sample(rng, candidates.len(), m)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    } else {
        (0..m)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    })
}
