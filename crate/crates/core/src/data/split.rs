use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::seeded;

/// `repeats` distinct training indices (fewer distinct values only when
/// `repeats > len`), one per one-shot repetition.
pub fn one_shot_indices(len: usize, repeats: usize, seed: u64) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::Empty("one-shot split needs at least two samples"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded(seed));
    Ok((0..repeats).map(|r| order[r % len]).collect())
}

/// One training sample and every other sample as the test set.
pub fn one_shot_split(len: usize, seed: u64) -> Result<(usize, Vec<usize>)> {
    let train = one_shot_indices(len, 1, seed)?[0];
    Ok((train, (0..len).filter(|&i| i != train).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n−1 denominator); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    /// Percent-scaled `mean±std` with two decimals, e.g. `76.07±0.57`.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}
