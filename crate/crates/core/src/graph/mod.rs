//! Heterogeneous knowledge-graph store.

mod io;
mod negatives;
mod split;
mod subgraph;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

pub use io::{load_graph, read_split, write_nodes, write_split, write_triples};
pub use negatives::{sample_negatives, NegativeSampler, MAX_RETRIES};
pub use split::{split_edges, EdgeSplit, SplitPart};
pub use subgraph::{homogeneous_subgraph, Subgraph};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    GeneProtein,
    Drug,
    Disease,
    Other(String),
}

impl NodeType {
    pub fn as_str(&self) -> &str {
        match self {
            NodeType::GeneProtein => "gene/protein",
            NodeType::Drug => "drug",
            NodeType::Disease => "disease",
            NodeType::Other(s) => s,
        }
    }

    /// Filesystem- and parameter-name-safe rendering (`gene/protein` becomes
    /// `gene_protein`).
    pub fn slug(&self) -> String {
        self.as_str()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect()
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeType {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "gene/protein" => NodeType::GeneProtein,
            "drug" => NodeType::Drug,
            "disease" => NodeType::Disease,
            other => NodeType::Other(other.to_string()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: usize,
    pub external_id: String,
    pub node_type: NodeType,
    /// e.g. molecule vs antibody for drugs.
    pub subtype: Option<String>,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Node types seen at either end of a relation, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationSignature {
    pub head_types: Vec<NodeType>,
    pub tail_types: Vec<NodeType>,
}

/// Typed nodes, named relations and deduplicated triples with adjacency
/// indices. Immutable once built.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    nodes: Vec<NodeRecord>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    out_adj: Vec<Vec<(usize, usize)>>,
    in_adj: Vec<Vec<(usize, usize)>>,
    signatures: Vec<RelationSignature>,
    nodes_by_type: BTreeMap<NodeType, Vec<usize>>,
    duplicates_dropped: usize,
}

impl KnowledgeGraph {
    /// Validates and indexes a graph. Node ids must be dense `0..n` in order;
    /// duplicate triples are dropped (first occurrence kept) and counted.
    pub fn new(nodes: Vec<NodeRecord>, relations: Vec<String>, triples: Vec<Triple>) -> Result<Self> {
        let mut seen_ext: HashMap<(&NodeType, &str), usize> = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::data(format!(
                    "node ids must be dense 0..n in order: position {i} holds id {}",
                    node.id
                )));
            }
            if let Some(prev) = seen_ext.insert((&node.node_type, node.external_id.as_str()), i) {
                return Err(Error::data(format!(
                    "nodes {prev} and {i} share type `{}` and external id `{}`",
                    node.node_type, node.external_id
                )));
            }
        }
        let n = nodes.len();
        let mut triple_set = HashSet::with_capacity(triples.len());
        let mut kept = Vec::with_capacity(triples.len());
        let mut duplicates = 0;
        for t in triples {
            if t.head >= n || t.tail >= n {
                return Err(Error::data(format!(
                    "triple ({}, {}, {}) references a node outside 0..{n}",
                    t.head, t.relation, t.tail
                )));
            }
            if t.relation >= relations.len() {
                return Err(Error::data(format!(
                    "triple references relation id {} of {}",
                    t.relation,
                    relations.len()
                )));
            }
            if triple_set.insert(t) {
                kept.push(t);
            } else {
                duplicates += 1;
            }
        }

        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        let mut signatures = vec![RelationSignature::default(); relations.len()];
        for t in &kept {
            out_adj[t.head].push((t.relation, t.tail));
            in_adj[t.tail].push((t.relation, t.head));
            let sig = &mut signatures[t.relation];
            let ht = &nodes[t.head].node_type;
            let tt = &nodes[t.tail].node_type;
            if !sig.head_types.contains(ht) {
                sig.head_types.push(ht.clone());
            }
            if !sig.tail_types.contains(tt) {
                sig.tail_types.push(tt.clone());
            }
        }
        let mut nodes_by_type: BTreeMap<NodeType, Vec<usize>> = BTreeMap::new();
        for node in &nodes {
            nodes_by_type
                .entry(node.node_type.clone())
                .or_default()
                .push(node.id);
        }
        Ok(KnowledgeGraph {
            nodes,
            relations,
            triples: kept,
            triple_set,
            out_adj,
            in_adj,
            signatures,
            nodes_by_type,
            duplicates_dropped: duplicates,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn node_type(&self, id: usize) -> &NodeType {
        &self.nodes[id].node_type
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_name(&self, r: usize) -> &str {
        &self.relations[r]
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    /// Outgoing `(relation, tail)` pairs of `node`.
    pub fn out_edges(&self, node: usize) -> &[(usize, usize)] {
        &self.out_adj[node]
    }

    /// Incoming `(relation, head)` pairs of `node`.
    pub fn in_edges(&self, node: usize) -> &[(usize, usize)] {
        &self.in_adj[node]
    }

    pub fn signature(&self, relation: usize) -> &RelationSignature {
        &self.signatures[relation]
    }

    /// First-seen `(head type, tail type)` of a relation; `None` for a
    /// relation with no triples.
    pub fn relation_type(&self, relation: usize) -> Option<(&NodeType, &NodeType)> {
        let sig = &self.signatures[relation];
        Some((sig.head_types.first()?, sig.tail_types.first()?))
    }

    pub fn node_types(&self) -> impl Iterator<Item = &NodeType> {
        self.nodes_by_type.keys()
    }

    pub fn nodes_of_type(&self, ty: &NodeType) -> &[usize] {
        self.nodes_by_type.get(ty).map_or(&[], Vec::as_slice)
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    /// Same nodes and relations, keeping only the triples at `indices`.
    pub fn with_triples(&self, indices: &[usize]) -> KnowledgeGraph {
        let triples = indices.iter().map(|&i| self.triples[i]).collect();
        KnowledgeGraph::new(self.nodes.clone(), self.relations.clone(), triples)
            .expect("subset of a valid graph is valid")
    }

    /// Node type per node id, handy for bulk lookups.
    pub fn type_of_each(&self) -> Vec<&NodeType> {
        self.nodes.iter().map(|n| &n.node_type).collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn node(id: usize, ty: NodeType) -> NodeRecord {
        NodeRecord {
            id,
            external_id: format!("X{id}"),
            node_type: ty,
            subtype: None,
            name: format!("node {id}"),
        }
    }

    /// drugs 0..3, proteins 3..6; drug-drug, drug-protein and protein-protein
    /// relations.
    pub fn small_graph() -> KnowledgeGraph {
        let mut nodes = Vec::new();
        for i in 0..3 {
            nodes.push(node(i, NodeType::Drug));
        }
        for i in 3..6 {
            nodes.push(node(i, NodeType::GeneProtein));
        }
        let relations = vec![
            "drug_drug".to_string(),
            "drug_protein".to_string(),
            "protein_protein".to_string(),
        ];
        let triples = vec![
            Triple::new(0, 0, 1),
            Triple::new(1, 0, 2),
            Triple::new(0, 1, 3),
            Triple::new(1, 1, 4),
            Triple::new(2, 1, 5),
            Triple::new(3, 2, 4),
            Triple::new(4, 2, 5),
        ];
        KnowledgeGraph::new(nodes, relations, triples).unwrap()
    }
}
