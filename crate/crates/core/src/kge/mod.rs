//! Link prediction: RGCN encoder, DistMult scorer, random-walk batches.

mod rgcn;
mod saint;
mod score;
mod train;

pub use rgcn::{RelationAdjacency, Rgcn};
pub use saint::{graphsaint_sample, SubgraphBatch};
pub use score::{distmult_logits, distmult_score, kge_loss, Z_NAME};
pub use train::{train_kge, write_log, EpochLog, KgeConfig, TrainState};

use crate::error::{Error, Result};
use crate::fusion::FusionBank;
use crate::graph::{KnowledgeGraph, Triple};
use crate::numerics::{indices, seeded_rng, ParamStore, Tape, Tensor, Var};

/// Parameter name of a learnable feature table.
pub const FEATURE_TABLE: &str = "features/z";

/// Node input features for the encoder.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    /// Fused modality vectors; fusion parameters live in the store.
    Fused(FusionBank),
    /// Fixed `num_nodes x k` table (e.g. pretrained z). When the store holds
    /// [`FEATURE_TABLE`] that copy is used and trained instead.
    Table(Tensor),
}

impl FeatureSource {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSource::Fused(bank) => bank.dim(),
            FeatureSource::Table(t) => t.cols(),
        }
    }

    /// Makes a table source learnable by copying it into the store.
    pub fn make_learnable(&self, store: &mut ParamStore) {
        if let FeatureSource::Table(t) = self {
            if !store.contains(FEATURE_TABLE) {
                store.insert(FEATURE_TABLE, t.clone());
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, nodes: &[usize]) -> Result<Var> {
        match self {
            FeatureSource::Fused(bank) => bank.forward_nodes(tape, store, nodes),
            FeatureSource::Table(t) => {
                if store.contains(FEATURE_TABLE) {
                    let all = tape.param(store, FEATURE_TABLE)?;
                    tape.gather_rows(all, indices(nodes.to_vec()))
                } else {
                    tape.constant(t.select_rows(nodes))
                }
            }
        }
    }
}

/// A trained link predictor, encoding over a fixed message graph.
#[derive(Clone, Debug)]
pub struct KgeModel {
    pub rgcn: Rgcn,
    pub features: FeatureSource,
    pub params: ParamStore,
    adjacency: RelationAdjacency,
    num_nodes: usize,
}

impl KgeModel {
    /// `message_graph` supplies the edges messages flow along (the training
    /// edges); scores can then be asked for any triple over its nodes.
    pub fn new(message_graph: &KnowledgeGraph, rgcn: Rgcn, features: FeatureSource, params: ParamStore) -> Result<Self> {
        if rgcn.num_relations != message_graph.num_relations() {
            return Err(Error::contract(format!(
                "model has {} relations, graph has {}",
                rgcn.num_relations,
                message_graph.num_relations()
            )));
        }
        let adjacency = RelationAdjacency::new(
            message_graph.num_nodes(),
            message_graph.num_relations(),
            message_graph.triples(),
        )?;
        Ok(KgeModel {
            rgcn,
            features,
            params,
            adjacency,
            num_nodes: message_graph.num_nodes(),
        })
    }

    /// Latent vectors of every node (eval mode), `num_nodes x out_dim`.
    pub fn embeddings(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let all: Vec<usize> = (0..self.num_nodes).collect();
        let x = self.features.forward(&mut tape, &self.params, &all)?;
        let h = self
            .rgcn
            .forward(&mut tape, &self.params, &self.adjacency, x, false, &mut seeded_rng(0))?;
        Ok(tape.value(h).clone())
    }

    pub fn relation_embeddings(&self) -> Result<&Tensor> {
        self.params.require(Z_NAME)
    }

    /// Probabilities `sigmoid(DistMult)` per triple, in input order.
    pub fn predict(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        let z = self.relation_embeddings()?;
        for t in triples {
            if t.relation >= z.rows() {
                return Err(Error::data(format!(
                    "unknown relation id {} ({} relations)",
                    t.relation,
                    z.rows()
                )));
            }
            if t.head >= self.num_nodes || t.tail >= self.num_nodes {
                return Err(Error::data(format!(
                    "triple ({}, {}, {}) names a node outside the graph",
                    t.head, t.relation, t.tail
                )));
            }
        }
        let x = self.embeddings()?;
        Ok(triples
            .iter()
            .map(|t| strict_sigmoid(distmult_score(x.row(t.head), z.row(t.relation), x.row(t.tail))))
            .collect())
    }
}

/// Logistic function kept inside the open unit interval.
pub fn strict_sigmoid(s: f64) -> f64 {
    let p = 1.0 / (1.0 + (-s).exp());
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn predict_links(model: &KgeModel, triples: &[Triple]) -> Result<Vec<f64>> {
    model.predict(triples)
}
