use std::str::FromStr;

use rand::seq::SliceRandom;

use super::KnowledgeGraph;
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitPart {
    Train = 0,
    Valid = 1,
    Test = 2,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Valid, SplitPart::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Valid => "valid",
            SplitPart::Test => "test",
        }
    }
}

impl FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitPart::Train),
            "valid" => Ok(SplitPart::Valid),
            "test" => Ok(SplitPart::Test),
            other => Err(format!("unknown split part `{other}` (train|valid|test)")),
        }
    }
}

/// Disjoint train/valid/test triple indices. Each part is kept sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl EdgeSplit {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

/// Part sizes for `total` items: valid and test are rounded to nearest,
/// train takes the remainder.
pub fn split_sizes(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let valid = ((ratios[1] * total as f64).round() as usize).min(total);
    let test = ((ratios[2] * total as f64).round() as usize).min(total - valid);
    [total - valid - test, valid, test]
}

/// Uniform random partition of the graph's triples under `seed`.
pub fn split_edges(graph: &KnowledgeGraph, ratios: [f64; 3], seed: u64) -> Result<EdgeSplit> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::config(format!(
            "split_ratios must all be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split_ratios must sum to 1, got {sum}"
        )));
    }
    let total = graph.num_triples();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seeded_rng(seed));
    let [n_train, n_valid, _] = split_sizes(total, ratios);
    let mut train = order[..n_train].to_vec();
    let mut valid = order[n_train..n_train + n_valid].to_vec();
    let mut test = order[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(EdgeSplit {
        train,
        valid,
        test,
        seed,
        ratios,
    })
}
