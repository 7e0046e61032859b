use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded train / validation / test partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Shuffles `0..n` with a seeded ChaCha stream and slices it contiguously.
/// Validation and test sizes are `floor(n * f)`; the remainder goes to train.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Input(format!("split fractions must be nonnegative, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("split fractions sum to {total}, expected 1")));
    }
    let nonzero = fractions.iter().filter(|f| **f > 0.0).count();
    if n < nonzero {
        return Err(Error::Input(format!(
            "cannot split {n} items into {nonzero} nonempty parts"
        )));
    }
    // The 1e-9 nudge keeps products such as 97500 * 0.15 from flooring one short.
    let part = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let n_val = part(fractions[1]);
    let n_test = part(fractions[2]);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok(SplitSpec {
        fractions,
        seed,
        train: order,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aqua_like_sizes() {
        let s = split_dataset(97500, [0.7, 0.15, 0.15], 0).unwrap();
        assert_eq!(s.sizes(), (68250, 14625, 14625));
    }

    #[test]
    fn two_way_split() {
        let s = split_dataset(10, [0.8, 0.2, 0.0], 1).unwrap();
        assert_eq!(s.sizes(), (8, 2, 0));
    }

    #[test]
    fn seed_determinism() {
        let a = split_dataset(100, [0.7, 0.15, 0.15], 42).unwrap();
        let b = split_dataset(100, [0.7, 0.15, 0.15], 42).unwrap();
        let c = split_dataset(100, [0.7, 0.15, 0.15], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(split_dataset(2, [0.5, 0.25, 0.25], 0).is_err());
        assert!(split_dataset(10, [0.5, 0.25, 0.3], 0).is_err());
    }
}
