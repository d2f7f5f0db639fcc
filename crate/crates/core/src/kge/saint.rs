use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triple};
use crate::numerics::seeded_rng;

/// Random-walk induced subgraph.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphBatch {
    /// Visited nodes, ascending.
    pub nodes: Vec<usize>,
    /// Every graph triple with both endpoints in `nodes`, in graph order.
    pub triples: Vec<Triple>,
    pub roots: Vec<usize>,
    pub walk_length: usize,
    pub seed: u64,
}

impl SubgraphBatch {
    /// Position of each graph node in `nodes` (`usize::MAX` if absent).
    pub fn local_index(&self, num_nodes: usize) -> Vec<usize> {
        let mut local = vec![usize::MAX; num_nodes];
        for (i, &n) in self.nodes.iter().enumerate() {
            local[n] = i;
        }
        local
    }

    /// `triples` with node ids mapped to positions in `nodes`.
    pub fn local_triples(&self, local: &[usize]) -> Vec<Triple> {
        self.triples
            .iter()
            .map(|t| Triple::new(local[t.head], t.relation, local[t.tail]))
            .collect()
    }
}

/// `num_roots` uniform roots, each walking `walk_length` steps along uniform
/// out-edges and jumping back to its root at dead ends.
pub fn graphsaint_sample(
    graph: &KnowledgeGraph,
    num_roots: usize,
    walk_length: usize,
    seed: u64,
) -> Result<SubgraphBatch> {
    if num_roots == 0 || walk_length == 0 {
        return Err(Error::config("graphsaint needs num_roots >= 1 and walk_length >= 1"));
    }
    if graph.num_triples() == 0 {
        return Err(Error::SamplingExhausted("graphsaint: graph has no edges".into()));
    }
    let mut rng = seeded_rng(seed);
    let n = graph.num_nodes();
    let roots: Vec<usize> = (0..num_roots).map(|_| rng.random_range(0..n)).collect();
    let mut visited = BTreeSet::new();
    for &root in &roots {
        visited.insert(root);
        let mut cur = root;
        for _ in 1..walk_length {
            let out = graph.out_edges(cur);
            cur = if out.is_empty() {
                root
            } else {
                out[rng.random_range(0..out.len())].1
            };
            visited.insert(cur);
        }
    }
    let nodes: Vec<usize> = visited.into_iter().collect();
    let mut member = vec![false; n];
    for &v in &nodes {
        member[v] = true;
    }
    let triples = graph
        .triples()
        .iter()
        .filter(|t| member[t.head] && member[t.tail])
        .copied()
        .collect();
    Ok(SubgraphBatch {
        nodes,
        triples,
        roots,
        walk_length,
        seed,
    })
}
