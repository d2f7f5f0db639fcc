use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{glorot, ParamStore, Rng64, SparseMatrix, Tape, Tensor, Var};

/// `D^-1/2 (A + I) D^-1/2` over the symmetrized edge set. Input self-loops
/// are ignored; every node gets exactly one.
pub fn normalized_adjacency(num_nodes: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut pairs = BTreeSet::new();
    for &(a, b) in edges {
        if a != b {
            pairs.insert((a, b));
            pairs.insert((b, a));
        }
    }
    let mut degree = vec![1.0f64; num_nodes];
    for &(a, _) in &pairs {
        degree[a] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut entries: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|(a, b)| (a, b, inv_sqrt[a] * inv_sqrt[b]))
        .collect();
    entries.extend((0..num_nodes).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])));
    SparseMatrix::from_triplets(num_nodes, num_nodes, entries)
}

/// Two-layer GCN `ReLU(Â ReLU(Â X W1 + b1) W2 + b2)`.
#[derive(Clone, Debug)]
pub struct GcnEncoder {
    prefix: String,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl GcnEncoder {
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        GcnEncoder {
            prefix: prefix.into(),
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    fn name(&self, layer: usize, leaf: &str) -> String {
        format!("{}enc/layer{layer}/{leaf}", self.prefix)
    }

    /// Glorot weights, zero biases.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng64) {
        let dims = [(self.in_dim, self.hidden_dim), (self.hidden_dim, self.out_dim)];
        for (layer, (i, o)) in dims.into_iter().enumerate() {
            store.insert(self.name(layer, "W"), glorot(i, o, rng));
            store.insert(self.name(layer, "b"), Tensor::zeros(1, o));
        }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, adj: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..2 {
            let w = tape.param(store, &self.name(layer, "W"))?;
            let b = tape.param(store, &self.name(layer, "b"))?;
            let xw = tape.matmul(h, w)?;
            let prop = tape.spmm(adj, xw)?;
            let pre = tape.add(prop, b)?;
            h = tape.relu(pre)?;
        }
        Ok(h)
    }
}

/// GRACE projection head `W1 ReLU(W0 h + b0) + b1`, `k -> k`.
#[derive(Clone, Debug)]
pub struct GraceHead {
    prefix: String,
    pub dim: usize,
    pub tau: f64,
}

impl GraceHead {
    pub fn new(prefix: impl Into<String>, dim: usize, tau: f64) -> Self {
        GraceHead {
            prefix: prefix.into(),
            dim,
            tau,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}proj/{leaf}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng64) {
        for l in 0..2 {
            store.insert(self.name(&format!("W{l}")), glorot(self.dim, self.dim, rng));
            store.insert(self.name(&format!("b{l}")), Tensor::zeros(1, self.dim));
        }
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let w0 = tape.param(store, &self.name("W0"))?;
        let b0 = tape.param(store, &self.name("b0"))?;
        let w1 = tape.param(store, &self.name("W1"))?;
        let b1 = tape.param(store, &self.name("b1"))?;
        let a = tape.matmul(h, w0)?;
        let a = tape.add(a, b0)?;
        let a = tape.relu(a)?;
        let o = tape.matmul(a, w1)?;
        tape.add(o, b1)
    }
}
