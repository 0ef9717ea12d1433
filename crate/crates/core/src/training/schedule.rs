/// `initial · 2^k` where `k` counts milestones with `epoch >= milestone`,
/// capped at `cap`.
pub fn batch_schedule(epoch: usize, milestones: &[usize], initial: usize, cap: usize) -> usize {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count() as u32;
    initial
        .saturating_mul(2usize.saturating_pow(passed))
        .min(cap)
}

/// Milestones at the quarter points of the epoch budget, skipping any that
/// would fall on the first epoch.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    let mut ms: Vec<usize> = (1..4).map(|q| q * epochs / 4).filter(|&m| m > 0).collect();
    ms.dedup();
    ms
}
