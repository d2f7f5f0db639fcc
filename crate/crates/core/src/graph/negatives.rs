use rand::Rng;

use super::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng64};

/// Draws per negative slot before giving up.
pub const MAX_RETRIES: usize = 100;

/// Type-compatible, filtered triple corruption.
///
/// For each relation the sampler holds the candidate heads (nodes whose type
/// appears as a head of that relation) and candidate tails. Corruptions that
/// hit a triple of `graph` are rejected and redrawn.
pub struct NegativeSampler<'g> {
    graph: &'g KnowledgeGraph,
    head_pools: Vec<Vec<usize>>,
    tail_pools: Vec<Vec<usize>>,
}

impl<'g> NegativeSampler<'g> {
    pub fn new(graph: &'g KnowledgeGraph) -> Self {
        Self::build(graph, |_| true)
    }

    /// Candidates restricted to `allowed` nodes (e.g. a minibatch). A pool
    /// that would end up with fewer than two members falls back to the full
    /// type-compatible pool.
    pub fn restricted(graph: &'g KnowledgeGraph, allowed: &[usize]) -> Self {
        let mut mask = vec![false; graph.num_nodes()];
        for &n in allowed {
            mask[n] = true;
        }
        let full = Self::new(graph);
        let mut restricted = Self::build(graph, |n| mask[n]);
        for r in 0..graph.num_relations() {
            if restricted.head_pools[r].len() < 2 {
                restricted.head_pools[r] = full.head_pools[r].clone();
            }
            if restricted.tail_pools[r].len() < 2 {
                restricted.tail_pools[r] = full.tail_pools[r].clone();
            }
        }
        restricted
    }

    fn build(graph: &'g KnowledgeGraph, keep: impl Fn(usize) -> bool) -> Self {
        let pool = |types: &[super::NodeType]| -> Vec<usize> {
            let mut v: Vec<usize> = types
                .iter()
                .flat_map(|t| graph.nodes_of_type(t).iter().copied())
                .filter(|&n| keep(n))
                .collect();
            v.sort_unstable();
            v
        };
        let (head_pools, tail_pools) = (0..graph.num_relations())
            .map(|r| {
                let sig = graph.signature(r);
                (pool(&sig.head_types), pool(&sig.tail_types))
            })
            .unzip();
        NegativeSampler {
            graph,
            head_pools,
            tail_pools,
        }
    }

    pub fn head_pool(&self, relation: usize) -> &[usize] {
        &self.head_pools[relation]
    }

    pub fn tail_pool(&self, relation: usize) -> &[usize] {
        &self.tail_pools[relation]
    }

    /// `ratio` corruptions per positive, in positive order.
    pub fn sample(&self, positives: &[Triple], ratio: usize, rng: &mut Rng64) -> Result<Vec<Triple>> {
        if ratio == 0 {
            return Err(Error::config("negative ratio must be >= 1"));
        }
        let mut out = Vec::with_capacity(positives.len() * ratio);
        for pos in positives {
            if pos.relation >= self.head_pools.len() {
                return Err(Error::contract(format!("unknown relation id {}", pos.relation)));
            }
            for _ in 0..ratio {
                out.push(self.corrupt(pos, rng)?);
            }
        }
        Ok(out)
    }

    fn corrupt(&self, pos: &Triple, rng: &mut Rng64) -> Result<Triple> {
        let heads = &self.head_pools[pos.relation];
        let tails = &self.tail_pools[pos.relation];
        if heads.len() < 2 && tails.len() < 2 {
            return Err(Error::SamplingExhausted(format!(
                "relation `{}` has a single compatible candidate on each side",
                self.graph.relation_name(pos.relation)
            )));
        }
        for _ in 0..MAX_RETRIES {
            let mut replace_head = rng.random_bool(0.5);
            if replace_head && heads.len() < 2 {
                replace_head = false;
            } else if !replace_head && tails.len() < 2 {
                replace_head = true;
            }
            let candidate = if replace_head {
                Triple::new(heads[rng.random_range(0..heads.len())], pos.relation, pos.tail)
            } else {
                Triple::new(pos.head, pos.relation, tails[rng.random_range(0..tails.len())])
            };
            if !self.graph.contains(&candidate) {
                return Ok(candidate);
            }
        }
        Err(Error::SamplingExhausted(format!(
            "no unseen corruption of ({}, {}, {}) after {MAX_RETRIES} draws",
            pos.head,
            self.graph.relation_name(pos.relation),
            pos.tail
        )))
    }
}

/// Filtered negatives against the full triple set of `graph`.
pub fn sample_negatives(
    positives: &[Triple],
    graph: &KnowledgeGraph,
    ratio: usize,
    seed: u64,
) -> Result<Vec<Triple>> {
    NegativeSampler::new(graph).sample(positives, ratio, &mut seeded_rng(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{node, small_graph};
    use crate::graph::NodeType;

    fn bigger_graph() -> KnowledgeGraph {
        let mut nodes: Vec<_> = (0..20).map(|i| node(i, NodeType::Drug)).collect();
        nodes.extend((20..40).map(|i| node(i, NodeType::Disease)));
        let mut triples = Vec::new();
        for i in 0..20 {
            for k in 0..5 {
                triples.push(Triple::new(i, 0, 20 + (i + k * 3) % 20));
            }
        }
        KnowledgeGraph::new(nodes, vec!["treats".into()], triples).unwrap()
    }

    #[test]
    fn ratio_three_counts_and_filtering() {
        let g = bigger_graph();
        let positives = g.triples().to_vec();
        let negs = sample_negatives(&positives, &g, 3, 9).unwrap();
        assert_eq!(negs.len(), 3 * positives.len());
        // brute-force membership scan
        for n in &negs {
            assert!(!positives.iter().any(|p| p == n), "{n:?} is a positive");
            assert_eq!(g.node_type(n.head), &NodeType::Drug);
            assert_eq!(g.node_type(n.tail), &NodeType::Disease);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let g = bigger_graph();
        let p = g.triples().to_vec();
        assert_eq!(
            sample_negatives(&p, &g, 1, 4).unwrap(),
            sample_negatives(&p, &g, 1, 4).unwrap()
        );
    }

    #[test]
    fn single_candidate_is_exhausted() {
        let nodes = vec![node(0, NodeType::Drug), node(1, NodeType::Disease)];
        let g = KnowledgeGraph::new(nodes, vec!["r".into()], vec![Triple::new(0, 0, 1)]).unwrap();
        let err = sample_negatives(g.triples(), &g, 1, 0).unwrap_err();
        assert!(matches!(err, Error::SamplingExhausted(_)));
    }

    #[test]
    fn saturated_relation_runs_out_of_retries() {
        // Every drug-drug pair among two nodes is already a triple.
        let nodes = (0..2).map(|i| node(i, NodeType::Drug)).collect();
        let triples = vec![
            Triple::new(0, 0, 0),
            Triple::new(0, 0, 1),
            Triple::new(1, 0, 0),
            Triple::new(1, 0, 1),
        ];
        let g = KnowledgeGraph::new(nodes, vec!["r".into()], triples).unwrap();
        assert!(matches!(
            sample_negatives(&g.triples()[..1], &g, 1, 0),
            Err(Error::SamplingExhausted(_))
        ));
    }

    #[test]
    fn restricted_pools_fall_back_when_tiny() {
        let g = small_graph();
        let s = NegativeSampler::restricted(&g, &[0, 1, 3]);
        // drug_protein tails restricted to {3} would be a single candidate.
        assert_eq!(s.tail_pool(1), &[3, 4, 5]);
        assert_eq!(s.head_pool(1), &[0, 1]);
    }
}
