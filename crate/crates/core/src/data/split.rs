use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The 70/10/20 random split.
    pub fn standard(seed: u64) -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(invalid(format!("split fractions must be non-negative: {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then train/val take rounded shares and test takes the residual.
pub fn split_dataset(ids: &[String], spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    if ids.is_empty() {
        return Err(invalid("cannot split an empty id list"));
    }
    let n = ids.len();
    let n_train = (spec.train_frac * n as f64).round() as usize;
    let n_val = (spec.val_frac * n as f64).round() as usize;
    if n_train + n_val > n {
        return Err(invalid(format!("rounded splits {n_train}+{n_val} exceed {n} ids")));
    }
    let n_test = n - n_train - n_val;
    for (name, frac, size) in [
        ("train", spec.train_frac, n_train),
        ("val", spec.val_frac, n_val),
        ("test", spec.test_frac, n_test),
    ] {
        if frac > 0.0 && size == 0 {
            return Err(invalid(format!("{name} split rounds to zero of {n} ids")));
        }
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(DatasetSplit {
        train: order,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFractionSplit {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
}

/// Keeps labels for `round(fraction·N)` whole samples; the rest become unlabeled.
pub fn subsample_labels(train_ids: &[String], fraction: f64, seed: u64) -> Result<LabelFractionSplit> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("label fraction {fraction} outside [0, 1]")));
    }
    let n_labeled = (fraction * train_ids.len() as f64).round() as usize;
    let mut order = train_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled = order.split_off(n_labeled);
    Ok(LabelFractionSplit {
        labeled: order,
        unlabeled,
        fraction,
        seed,
    })
}
