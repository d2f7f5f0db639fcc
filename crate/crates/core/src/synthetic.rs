//! Seeded community-structured graphs with attribute tables, for smoke runs
//! and trend checks at desk scale.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, NodeRecord, NodeType, Triple};
use crate::modality::{EmbeddingTable, Modality};
use crate::numerics::{seeded_rng, sub_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_nodes: usize,
    pub num_relations: usize,
    pub num_triples: usize,
    pub communities: usize,
    /// Attribute width.
    pub dim: usize,
    /// Per-entry noise relative to the community centroid scale.
    pub noise: f64,
    pub node_types: Vec<NodeType>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_nodes: 300,
            num_relations: 6,
            num_triples: 1500,
            communities: 6,
            dim: 32,
            noise: 1.0,
            node_types: vec![NodeType::Drug, NodeType::GeneProtein, NodeType::Disease],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticKg {
    pub graph: KnowledgeGraph,
    /// Latent community of each node.
    pub community: Vec<usize>,
    /// Sequence and description tables: community centroid plus noise.
    pub tables: Vec<EmbeddingTable>,
}

/// Type pairs a relation may join, same-type pairs first so that every type
/// gets a homogeneous subgraph once there are enough relations.
fn type_pairs(t: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..t).map(|a| (a, a)).collect();
    for a in 0..t {
        for b in 0..t {
            if a != b {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Nodes are dealt round-robin over types and communities. Relation `r`
/// joins its type pair and maps head community `c` to tail community
/// `(c + r) mod K`, so observed edges are predictable from attributes.
pub fn synthetic_graph(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticKg> {
    let t = cfg.node_types.len();
    if t == 0 || cfg.num_relations == 0 || cfg.communities == 0 || cfg.dim == 0 {
        return Err(Error::config("synthetic graph needs node types, relations, communities and dim"));
    }
    if cfg.num_nodes < t * cfg.communities {
        return Err(Error::config(format!(
            "{} nodes cannot cover {t} types x {} communities",
            cfg.num_nodes, cfg.communities
        )));
    }
    let mut rng = seeded_rng(sub_seed(seed, "synthetic/graph", 0));
    let mut nodes = Vec::with_capacity(cfg.num_nodes);
    let mut community = Vec::with_capacity(cfg.num_nodes);
    // members[type][community]
    let mut members = vec![vec![Vec::new(); cfg.communities]; t];
    for id in 0..cfg.num_nodes {
        let ty = id % t;
        let c = (id / t) % cfg.communities;
        nodes.push(NodeRecord {
            id,
            external_id: format!("N{id}"),
            node_type: cfg.node_types[ty].clone(),
            subtype: None,
            name: format!("synthetic {id}"),
        });
        community.push(c);
        members[ty][c].push(id);
    }

    let pairs = type_pairs(t);
    let relations: Vec<String> = (0..cfg.num_relations)
        .map(|r| {
            let (a, b) = pairs[r % pairs.len()];
            format!("{}_{}_{r}", cfg.node_types[a].slug(), cfg.node_types[b].slug())
        })
        .collect();
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(cfg.num_triples);
    let max_attempts = cfg.num_triples.saturating_mul(50).max(1000);
    for _ in 0..max_attempts {
        if triples.len() == cfg.num_triples {
            break;
        }
        let r = rng.random_range(0..cfg.num_relations);
        let (a, b) = pairs[r % pairs.len()];
        let pool_a = &members[a];
        let c = rng.random_range(0..cfg.communities);
        let head = pool_a[c][rng.random_range(0..pool_a[c].len())];
        let tc = (c + r) % cfg.communities;
        let pool_b = &members[b][tc];
        let tail = pool_b[rng.random_range(0..pool_b.len())];
        if head == tail {
            continue;
        }
        let tr = Triple::new(head, r, tail);
        if seen.insert(tr) {
            triples.push(tr);
        }
    }
    if triples.len() < cfg.num_triples {
        return Err(Error::config(format!(
            "only {} distinct triples fit the community structure ({} requested)",
            triples.len(),
            cfg.num_triples
        )));
    }
    let graph = KnowledgeGraph::new(nodes, relations, triples)?;

    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let centroid = Normal::new(0.0, scale).unwrap();
    let noise = Normal::new(0.0, scale * cfg.noise).unwrap();
    let mut tables = Vec::new();
    for m in [Modality::Sequence, Modality::Description] {
        let mut arng = seeded_rng(sub_seed(seed, &format!("synthetic/{}", m.tag()), 0));
        let centroids: Vec<Vec<f64>> = (0..cfg.communities)
            .map(|_| (0..cfg.dim).map(|_| centroid.sample(&mut arng)).collect())
            .collect();
        let mut table = EmbeddingTable::new(m, cfg.dim);
        for (n, &c) in community.iter().enumerate() {
            let v = centroids[c].iter().map(|x| x + noise.sample(&mut arng)).collect();
            table.insert(n, v)?;
        }
        tables.push(table);
    }
    Ok(SyntheticKg {
        graph,
        community,
        tables,
    })
}
