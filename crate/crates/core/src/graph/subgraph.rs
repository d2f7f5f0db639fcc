use super::{KnowledgeGraph, NodeRecord, NodeType, Triple};

/// A graph restricted to one node type, with local ids mapped back to the
/// parent graph.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: KnowledgeGraph,
    /// `parent_ids[local]` is the node id in the parent graph.
    pub parent_ids: Vec<usize>,
}

impl Subgraph {
    pub fn num_nodes(&self) -> usize {
        self.parent_ids.len()
    }

    /// Undirected local edge list (each triple once, orientation as stored).
    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.graph.triples().iter().map(|t| (t.head, t.tail)).collect()
    }
}

/// Nodes of `node_type` and the triples with both endpoints of that type.
/// Relation ids and names are kept as in the parent.
pub fn homogeneous_subgraph(graph: &KnowledgeGraph, node_type: &NodeType) -> Subgraph {
    let parent_ids = graph.nodes_of_type(node_type).to_vec();
    let mut local = vec![usize::MAX; graph.num_nodes()];
    for (i, &p) in parent_ids.iter().enumerate() {
        local[p] = i;
    }
    let nodes = parent_ids
        .iter()
        .enumerate()
        .map(|(i, &p)| NodeRecord {
            id: i,
            ..graph.node(p).clone()
        })
        .collect();
    let triples = graph
        .triples()
        .iter()
        .filter(|t| local[t.head] != usize::MAX && local[t.tail] != usize::MAX)
        .map(|t| Triple::new(local[t.head], t.relation, local[t.tail]))
        .collect();
    let sub = KnowledgeGraph::new(nodes, graph.relations().to_vec(), triples)
        .expect("restriction of a valid graph is valid");
    Subgraph {
        graph: sub,
        parent_ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::small_graph;

    #[test]
    fn drug_subgraph_keeps_only_drug_drug() {
        let g = small_graph();
        let sub = homogeneous_subgraph(&g, &NodeType::Drug);
        assert_eq!(sub.num_nodes(), 3);
        assert!(sub
            .graph
            .triples()
            .iter()
            .all(|t| g.relation_name(t.relation) == "drug_drug"));
        assert_eq!(sub.graph.num_triples(), 2);
    }

    #[test]
    fn brute_force_equality() {
        let g = small_graph();
        for ty in [NodeType::Drug, NodeType::GeneProtein] {
            let sub = homogeneous_subgraph(&g, &ty);
            let mut expected: Vec<Triple> = g
                .triples()
                .iter()
                .filter(|t| g.node_type(t.head) == &ty && g.node_type(t.tail) == &ty)
                .copied()
                .collect();
            let mut mapped: Vec<Triple> = sub
                .graph
                .triples()
                .iter()
                .map(|t| Triple::new(sub.parent_ids[t.head], t.relation, sub.parent_ids[t.tail]))
                .collect();
            expected.sort();
            mapped.sort();
            assert_eq!(mapped, expected);
            let mut ids = sub.parent_ids.clone();
            ids.dedup();
            assert_eq!(ids.len(), sub.parent_ids.len(), "mapping must be injective");
        }
    }

    #[test]
    fn type_without_nodes_or_edges() {
        let g = small_graph();
        let empty = homogeneous_subgraph(&g, &NodeType::Disease);
        assert_eq!(empty.num_nodes(), 0);
        assert_eq!(empty.graph.num_triples(), 0);

        let only_drug_protein = g.with_triples(&[2, 3, 4]);
        let drugs = homogeneous_subgraph(&only_drug_protein, &NodeType::Drug);
        assert_eq!(drugs.num_nodes(), 3);
        assert_eq!(drugs.graph.num_triples(), 0);
    }
}
