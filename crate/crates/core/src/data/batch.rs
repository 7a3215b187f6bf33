use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Shuffle,
    /// Interleave groups so every batch mirrors the dataset's group histogram.
    GroupStratified,
}

/// Index batches for one epoch. The order is a pure function of
/// `(seed, epoch)`; the final short batch is kept.
pub fn make_batches(
    dataset: &TaskDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    mode: BatchMode,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    if dataset.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let order = match mode {
        BatchMode::Shuffle => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.shuffle(&mut rng);
            idx
        }
        BatchMode::GroupStratified => {
            let schema = &dataset.spec.schema;
            let ungrouped = schema.group_count();
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); ungrouped + 1];
            for (i, ex) in dataset.examples.iter().enumerate() {
                let b = ex.groups.as_ref().map_or(ungrouped, |g| schema.group_index(g));
                buckets[b].push(i);
            }
            for b in &mut buckets {
                b.shuffle(&mut rng);
            }
            interleave(buckets)
        }
    };
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Merges buckets so that after every prefix of length t, bucket g has
/// contributed as close to `t * n_g / N` items as possible.
fn interleave(buckets: Vec<Vec<usize>>) -> Vec<usize> {
    let total: usize = buckets.iter().map(Vec::len).sum();
    let mut taken = vec![0usize; buckets.len()];
    let mut out = Vec::with_capacity(total);
    for t in 1..=total {
        let mut best = None;
        let mut best_deficit = f64::NEG_INFINITY;
        for (g, b) in buckets.iter().enumerate() {
            if taken[g] == b.len() {
                continue;
            }
            let deficit = (t * b.len()) as f64 / total as f64 - taken[g] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = Some(g);
            }
        }
        let g = best.expect("items remain");
        out.push(buckets[g][taken[g]]);
        taken[g] += 1;
    }
    out
}
