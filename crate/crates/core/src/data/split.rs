use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttributeSchema, DataError, Example, Label};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StratifyKey {
    Label,
    Attribute(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Strata too small to split, assigned wholly to train.
    pub warnings: Vec<String>,
}

/// Splits `examples` into train/dev/test per stratum.
///
/// Within each stratum the split sizes are the floor of `n * ratio` with the
/// leftover examples handed out by largest fractional part, so each count is
/// within one example of its ratio. Each split keeps the input order.
pub fn stratified_split(
    examples: &[Example],
    schema: &AttributeSchema,
    ratios: [f64; 3],
    keys: &[StratifyKey],
    seed: u64,
) -> Result<SplitOutcome, DataError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().all(|r| *r == 0.0) {
        return Err(DataError::Config(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!("split ratios sum to {total}, expected 1")));
    }
    let mut positions = Vec::new();
    for k in keys {
        if let StratifyKey::Attribute(name) = k {
            positions.push(
                schema
                    .position(name)
                    .ok_or_else(|| DataError::Config(format!("unknown attribute {name:?}")))?,
            );
        }
    }

    let mut strata: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut key = Vec::with_capacity(keys.len());
        let mut attr = positions.iter();
        for k in keys {
            key.push(match k {
                StratifyKey::Label => match &ex.label {
                    Label::Class(c) => *c as i64,
                    Label::Multi(bits) => bits.iter().fold(0i64, |acc, &b| (acc << 1) | i64::from(b)),
                },
                StratifyKey::Attribute(_) => {
                    let p = *attr.next().expect("position per attribute key");
                    ex.groups.as_ref().map_or(-1, |g| g.0[p] as i64)
                }
            });
        }
        strata.entry(key).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u8; examples.len()];
    let mut warnings = Vec::new();
    let requested = ratios.iter().filter(|r| **r > 0.0).count();
    for (key, mut members) in strata {
        members.shuffle(&mut rng);
        let n = members.len();
        if requested == 3 && n < 3 {
            warnings.push(format!("stratum {key:?} has {n} example(s); assigned wholly to train"));
            continue;
        }
        let counts = apportion(n, &ratios);
        let mut cursor = 0;
        for (split, &c) in counts.iter().enumerate() {
            for &m in &members[cursor..cursor + c] {
                assignment[m] = split as u8;
            }
            cursor += c;
        }
    }

    let mut out = SplitOutcome {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        warnings,
    };
    for (ex, &a) in examples.iter().zip(&assignment) {
        match a {
            0 => out.train.push(ex.clone()),
            1 => out.dev.push(ex.clone()),
            _ => out.test.push(ex.clone()),
        }
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items by `weights` (summing to 1).
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}
