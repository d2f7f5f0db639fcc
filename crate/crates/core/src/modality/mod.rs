//! Per-modality embedding tables with keyed random fills for missing rows.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use io::{load_table, read_binary, read_tsv, write_binary, write_tsv};

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, NodeType};
use crate::numerics::{sub_seed, Tensor};

/// Embedding width of the language-model dumps.
pub const DEFAULT_DIM: usize = 768;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Sequence,
    Description,
    Structural,
    /// Derived tables such as `gcl:drug` or `kge`.
    Custom(String),
}

impl Modality {
    pub fn tag(&self) -> &str {
        match self {
            Modality::Sequence => "sequence",
            Modality::Description => "description",
            Modality::Structural => "structural",
            Modality::Custom(s) => s,
        }
    }

    pub fn gcl(node_type: &NodeType) -> Modality {
        Modality::Custom(format!("gcl:{node_type}"))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" => Err(Error::config("empty modality tag")),
            "sequence" => Ok(Modality::Sequence),
            "description" => Ok(Modality::Description),
            "structural" => Ok(Modality::Structural),
            other if other.contains(char::is_whitespace) => {
                Err(Error::config(format!("modality tag `{other}` contains whitespace")))
            }
            other => Ok(Modality::Custom(other.to_string())),
        }
    }
}

/// One vector per node for a single modality, keyed by dense node id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    modality: Modality,
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
    skipped: usize,
}

impl EmbeddingTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        EmbeddingTable {
            modality,
            dim,
            rows: BTreeMap::new(),
            skipped: 0,
        }
    }

    pub fn modality(&self) -> &Modality {
        &self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, node: usize) -> Option<&[f64]> {
        self.rows.get(&node).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&n, v)| (n, v.as_slice()))
    }

    /// Rows dropped by [`EmbeddingTable::attach`] for unknown node ids.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn insert(&mut self, node: usize, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::data(format!(
                "node {node}: {} vector has dim {}, table dim is {}",
                self.modality,
                vector.len(),
                self.dim
            )));
        }
        if let Some(bad) = vector.iter().position(|x| !x.is_finite()) {
            return Err(Error::data(format!(
                "node {node}: {} vector has non-finite entry at {bad}",
                self.modality
            )));
        }
        self.rows.insert(node, vector);
        Ok(())
    }

    /// Drops rows whose node id is not in `graph`, logging and counting them.
    pub fn attach(&mut self, graph: &KnowledgeGraph) {
        let n = graph.num_nodes();
        let before = self.rows.len();
        self.rows.retain(|&id, _| id < n);
        let dropped = before - self.rows.len();
        if dropped > 0 {
            log::warn!(
                "{} table: skipped {dropped} rows for node ids outside 0..{n}",
                self.modality
            );
        }
        self.skipped += dropped;
    }

    /// Builds a table from the rows of `matrix`, row `i` belonging to
    /// `nodes[i]`.
    pub fn from_matrix(modality: Modality, nodes: &[usize], matrix: &Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2();
        if r != nodes.len() {
            return Err(Error::contract(format!(
                "{r} rows for {} node ids",
                nodes.len()
            )));
        }
        let mut table = EmbeddingTable::new(modality, c);
        for (i, &n) in nodes.iter().enumerate() {
            table.insert(n, matrix.row(i).to_vec())?;
        }
        Ok(table)
    }
}

/// Deterministic Gaussian fill for a missing `(node, modality)` slot with
/// standard deviation `1/sqrt(dim)`. Pure in its arguments.
pub fn keyed_fill(seed: u64, node: usize, modality: &Modality, dim: usize) -> Vec<f64> {
    let key = sub_seed(seed, &format!("fill/{}", modality.tag()), node as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Loaded,
    RandomInit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityView {
    pub node: usize,
    pub vectors: Vec<(Modality, Vec<f64>, Provenance)>,
}

impl ModalityView {
    pub fn m(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.1.len())
    }
}

/// Loaded vs random-init slot counts for one modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProvenanceCount {
    pub loaded: usize,
    pub random_init: usize,
}

/// The enabled modalities (sequence, description, optionally structural)
/// and whatever tables were loaded for them.
#[derive(Clone, Debug)]
pub struct ModalityStore {
    dim: usize,
    seed: u64,
    modalities: Vec<Modality>,
    tables: BTreeMap<Modality, EmbeddingTable>,
}

impl ModalityStore {
    pub fn new(dim: usize, seed: u64, structural: bool) -> Self {
        let mut modalities = vec![Modality::Sequence, Modality::Description];
        if structural {
            modalities.push(Modality::Structural);
        }
        Self::with_modalities(dim, seed, modalities)
    }

    /// A store over an explicit modality list (e.g. a single `gcl:<type>`
    /// slot).
    pub fn with_modalities(dim: usize, seed: u64, modalities: Vec<Modality>) -> Self {
        assert!(!modalities.is_empty(), "a modality store needs at least one slot");
        ModalityStore {
            dim,
            seed,
            modalities,
            tables: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn table(&self, modality: &Modality) -> Option<&EmbeddingTable> {
        self.tables.get(modality)
    }

    pub fn add_table(&mut self, table: EmbeddingTable) -> Result<()> {
        if table.dim() != self.dim {
            return Err(Error::data(format!(
                "{} table has dim {}, store expects {}",
                table.modality(),
                table.dim(),
                self.dim
            )));
        }
        if !self.modalities.contains(table.modality()) {
            return Err(Error::config(format!(
                "modality `{}` is not enabled (enabled: {})",
                table.modality(),
                self.modalities.iter().map(Modality::tag).collect::<Vec<_>>().join(", ")
            )));
        }
        self.tables.insert(table.modality().clone(), table);
        Ok(())
    }

    fn slot(&self, node: usize, modality: &Modality) -> (Vec<f64>, Provenance) {
        match self.tables.get(modality).and_then(|t| t.get(node)) {
            Some(v) => (v.to_vec(), Provenance::Loaded),
            None => (keyed_fill(self.seed, node, modality, self.dim), Provenance::RandomInit),
        }
    }

    pub fn get_modalities(&self, node: usize) -> ModalityView {
        let vectors = self
            .modalities
            .iter()
            .map(|m| {
                let (v, p) = self.slot(node, m);
                (m.clone(), v, p)
            })
            .collect();
        ModalityView { node, vectors }
    }

    /// `nodes.len() x dim` matrix of one modality's slots.
    pub fn matrix(&self, modality: &Modality, nodes: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(nodes.len() * self.dim);
        for &n in nodes {
            data.extend(self.slot(n, modality).0);
        }
        Tensor::matrix(nodes.len(), self.dim, data).unwrap()
    }

    pub fn provenance_counts(&self, nodes: &[usize]) -> Vec<(Modality, ProvenanceCount)> {
        self.modalities
            .iter()
            .map(|m| {
                let table = self.tables.get(m);
                let loaded = nodes
                    .iter()
                    .filter(|&&n| table.is_some_and(|t| t.get(n).is_some()))
                    .count();
                (
                    m.clone(),
                    ProvenanceCount {
                        loaded,
                        random_init: nodes.len() - loaded,
                    },
                )
            })
            .collect()
    }
}

/// Stand-in for language-model dumps: fully populated sequence and
/// description tables of unit-norm keyed vectors.
pub fn mock_provider(graph: &KnowledgeGraph, seed: u64, dim: usize) -> Vec<EmbeddingTable> {
    assert!(dim > 0, "mock_provider needs dim > 0");
    [Modality::Sequence, Modality::Description]
        .into_iter()
        .map(|m| {
            let mut table = EmbeddingTable::new(m.clone(), dim);
            let label = Modality::Custom(format!("mock/{}", m.tag()));
            for node in 0..graph.num_nodes() {
                let mut v = keyed_fill(seed, node, &label, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                table.insert(node, v).unwrap();
            }
            table
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::small_graph;
    use std::collections::HashSet;

    #[test]
    fn loaded_and_random_slots() {
        let mut store = ModalityStore::new(4, 7, false);
        let mut seq = EmbeddingTable::new(Modality::Sequence, 4);
        seq.insert(0, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut desc = EmbeddingTable::new(Modality::Description, 4);
        desc.insert(0, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        desc.insert(1, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        store.add_table(seq).unwrap();
        store.add_table(desc).unwrap();

        let v0 = store.get_modalities(0);
        assert_eq!(v0.m(), 2);
        assert!(v0.vectors.iter().all(|v| v.2 == Provenance::Loaded));

        let v1 = store.get_modalities(1);
        assert_eq!(v1.vectors[0].0, Modality::Sequence);
        assert_eq!(v1.vectors[0].2, Provenance::RandomInit);
        assert_eq!(store.get_modalities(1), v1);
        let counts = store.provenance_counts(&[0, 1, 2]);
        assert_eq!(counts[0].1, ProvenanceCount { loaded: 1, random_init: 2 });
        assert_eq!(counts[1].1, ProvenanceCount { loaded: 2, random_init: 1 });
    }

    #[test]
    fn fills_do_not_collide() {
        let mut seen = HashSet::new();
        for node in 0..1000 {
            let v = keyed_fill(3, node, &Modality::Sequence, 16);
            let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits), "collision at node {node}");
        }
        assert_ne!(
            keyed_fill(3, 5, &Modality::Sequence, 16),
            keyed_fill(3, 5, &Modality::Description, 16)
        );
    }

    #[test]
    fn fill_scale_tracks_dim() {
        let v = keyed_fill(1, 0, &Modality::Sequence, 768);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 0.1, "norm {norm}");
    }

    #[test]
    fn mock_tables_are_unit_norm_and_stable() {
        let g = small_graph();
        let a = mock_provider(&g, 2, 768);
        assert_eq!(a.len(), 2);
        for t in &a {
            assert_eq!(t.len(), g.num_nodes());
            for (_, v) in t.iter() {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() <= 1e-9);
            }
        }
        assert_eq!(a, mock_provider(&g, 2, 768));
    }

    #[test]
    fn wrong_dims_are_rejected() {
        let mut t = EmbeddingTable::new(Modality::Sequence, 3);
        assert!(t.insert(4, vec![0.0; 2]).unwrap_err().to_string().contains("node 4"));
        let mut store = ModalityStore::new(4, 0, false);
        assert!(store.add_table(t).is_err());
        assert!(store
            .add_table(EmbeddingTable::new(Modality::Structural, 4))
            .is_err());
    }

    #[test]
    fn attach_skips_unknown_nodes() {
        let g = small_graph();
        let mut t = EmbeddingTable::new(Modality::Sequence, 1);
        t.insert(0, vec![1.0]).unwrap();
        t.insert(60, vec![1.0]).unwrap();
        t.attach(&g);
        assert_eq!((t.len(), t.skipped()), (1, 1));
    }
}
