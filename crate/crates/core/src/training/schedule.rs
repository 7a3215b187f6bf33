/// Sampling probabilities from per-task dev scores in `[0, 1]`: weight
/// `max(γ_min, 1 − score)`, normalized.
pub fn dynamic_schedule(scores: &[f64], gamma_min: f64) -> Vec<f64> {
    let weights: Vec<f64> = scores
        .iter()
        .map(|s| (1.0 - s.clamp(0.0, 1.0)).max(gamma_min))
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Index of the task selected by a uniform draw `u ∈ [0, 1)`.
pub(crate) fn sample_index(probabilities: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}
