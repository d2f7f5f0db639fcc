use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng64, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRecord {
    pub p_mask: f64,
    pub p_drop: f64,
    pub seed: u64,
}

/// A stochastically corrupted copy of a graph's features and edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView {
    pub features: Tensor,
    pub edges: Vec<(usize, usize)>,
    /// Nodes whose feature row was zeroed, ascending.
    pub masked: Vec<usize>,
    pub record: AugmentRecord,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Draws the node mask and surviving edges; mask draws come first, then one
/// draw per edge in order.
pub fn draw_augmentation(
    num_nodes: usize,
    edges: &[(usize, usize)],
    p_mask: f64,
    p_drop: f64,
    rng: &mut Rng64,
) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    check_prob("p_mask", p_mask)?;
    check_prob("p_drop", p_drop)?;
    let masked = (0..num_nodes).filter(|_| rng.random::<f64>() < p_mask).collect();
    let kept = edges
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= p_drop)
        .collect();
    Ok((masked, kept))
}

/// Zeroes each feature row with probability `p_mask` and drops each edge
/// with probability `p_drop`.
pub fn augment(
    edges: &[(usize, usize)],
    features: &Tensor,
    p_mask: f64,
    p_drop: f64,
    seed: u64,
) -> Result<GraphView> {
    let mut rng = seeded_rng(seed);
    let (masked, kept) = draw_augmentation(features.rows(), edges, p_mask, p_drop, &mut rng)?;
    let mut x = features.clone();
    for &n in &masked {
        x.row_mut(n).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(GraphView {
        features: x,
        edges: kept,
        masked,
        record: AugmentRecord { p_mask, p_drop, seed },
    })
}
