use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One nested training subset: sorted indices into the original collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub fraction: f64,
    pub indices: Vec<usize>,
}

/// `{1, 1/2, 1/4, ...}` down to `1 / 2^(count-1)`.
pub fn power_of_two_fractions(count: usize) -> Vec<f64> {
    (0..count).map(|k| 0.5f64.powi(k as i32)).collect()
}

/// Draws nested subsets of `n` items: every subset is a prefix of a single
/// seeded permutation, so smaller fractions are contained in larger ones.
/// Indices are returned sorted, so fraction 1.0 is the identity.
pub fn subsample_training_set(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Subset>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
            }
            let size = (n as f64 * f + 1e-9).floor() as usize;
            if size == 0 {
                return Err(Error::Data(format!("fraction {f} of {n} samples is empty")));
            }
            let mut indices = perm[..size].to_vec();
            indices.sort_unstable();
            Ok(Subset { fraction: f, indices })
        })
        .collect()
}
