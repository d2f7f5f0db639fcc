//! End-to-end composition of fusion, pretraining and link prediction.

use std::ops::ControlFlow;

use crate::error::{Error, Result};
use crate::fusion::{FusionBank, FusionMethod};
use crate::gcl::{pretrain, GclConfig, GclMethod, PretrainOutput};
use crate::graph::{EdgeSplit, KnowledgeGraph};
use crate::kge::{train_kge, FeatureSource, KgeConfig, KgeModel, Rgcn, TrainState};
use crate::modality::{keyed_fill, EmbeddingTable, Modality, ModalityStore};
use crate::numerics::{seeded_rng, sub_seed, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub fusion: FusionMethod,
    /// Fused width D.
    pub dim: usize,
    /// Adds the learnable structural member to the fusion.
    pub structural: bool,
    /// `method = none` feeds fused vectors to the link predictor directly.
    pub gcl: GclConfig,
    /// Keep pretrained z fixed during link-prediction training.
    pub freeze: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            fusion: FusionMethod::Attention,
            dim: 128,
            structural: false,
            gcl: GclConfig::default(),
            freeze: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Features {
    pub source: FeatureSource,
    /// Parameters the link predictor starts from: fusion weights when fused
    /// features are used, the z table when unfrozen, otherwise empty.
    pub params: ParamStore,
    pub pretrain: Option<PretrainOutput>,
}

/// Fusion parameters for every node type of `graph`.
pub fn init_fusion(
    graph: &KnowledgeGraph,
    modalities: &ModalityStore,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<(FusionBank, ParamStore)> {
    let bank = FusionBank::new(graph, modalities, cfg.fusion, cfg.dim, cfg.structural)?;
    let mut params = ParamStore::new();
    bank.init_params(graph, modalities, &mut params, &mut seeded_rng(sub_seed(seed, "fusion/init", 0)))?;
    Ok((bank, params))
}

/// Builds link-prediction features. Pretraining only sees `train_graph`.
pub fn prepare_features(
    graph: &KnowledgeGraph,
    train_graph: &KnowledgeGraph,
    modalities: &ModalityStore,
    cfg: &FeatureConfig,
    seed: u64,
    threads: usize,
) -> Result<Features> {
    let (bank, fusion_params) = init_fusion(graph, modalities, cfg, seed)?;
    if cfg.gcl.method == GclMethod::None {
        return Ok(Features {
            source: FeatureSource::Fused(bank),
            params: fusion_params,
            pretrain: None,
        });
    }
    let out = pretrain(train_graph, &bank, &fusion_params, &cfg.gcl, seed, threads)?;
    let source = FeatureSource::Table(out.feature_matrix(graph, modalities.seed()));
    let mut params = ParamStore::new();
    if !cfg.freeze {
        source.make_learnable(&mut params);
    }
    Ok(Features {
        source,
        params,
        pretrain: Some(out),
    })
}

/// Trains the link predictor and returns it with its best-validation
/// parameters, messages flowing along the training edges.
pub fn fit(
    graph: &KnowledgeGraph,
    split: &EdgeSplit,
    features: &Features,
    cfg: &KgeConfig,
    seed: u64,
) -> Result<(KgeModel, TrainState)> {
    let state = train_kge(
        graph,
        split,
        &features.source,
        features.params.clone(),
        cfg,
        seed,
        None,
        &mut |_| Ok(ControlFlow::Continue(())),
    )?;
    let model = model_from_params(graph, split, &features.source, state.best_params.clone(), cfg)?;
    Ok((model, state))
}

pub fn model_from_params(
    graph: &KnowledgeGraph,
    split: &EdgeSplit,
    source: &FeatureSource,
    params: ParamStore,
    cfg: &KgeConfig,
) -> Result<KgeModel> {
    let rgcn = Rgcn::new(graph.num_relations(), source.dim(), cfg.hidden_dim, cfg.dim, cfg.optim.dropout);
    KgeModel::new(&graph.with_triples(&split.train), rgcn, source.clone(), params)
}

/// Rebuilds the link-predictor input matrix from exported z tables (one per
/// node type); nodes no table covers get the same keyed fill as
/// [`PretrainOutput::feature_matrix`].
pub fn feature_matrix_from_tables(graph: &KnowledgeGraph, tables: &[EmbeddingTable], seed: u64) -> Result<Tensor> {
    let k = match tables.first() {
        Some(t) => t.dim(),
        None => return Err(Error::data("no z tables to build features from")),
    };
    let mut out = Tensor::zeros(graph.num_nodes(), k);
    let mut filled = vec![false; graph.num_nodes()];
    for t in tables {
        if t.dim() != k {
            return Err(Error::data(format!(
                "z table `{}` has dim {}, others {k}",
                t.modality(),
                t.dim()
            )));
        }
        for (n, row) in t.iter() {
            if n >= graph.num_nodes() {
                return Err(Error::data(format!("z table `{}` names unknown node {n}", t.modality())));
            }
            out.row_mut(n).copy_from_slice(row);
            filled[n] = true;
        }
    }
    for (n, done) in filled.iter().enumerate() {
        if !done {
            let fill = keyed_fill(seed, n, &Modality::gcl(graph.node_type(n)), k);
            out.row_mut(n).copy_from_slice(&fill);
        }
    }
    Ok(out)
}

/// Fixed Gaussian features carrying no attribute information.
pub fn random_features(graph: &KnowledgeGraph, dim: usize, seed: u64) -> Features {
    let label = Modality::Custom("random".into());
    let mut t = Tensor::zeros(graph.num_nodes(), dim);
    for n in 0..graph.num_nodes() {
        t.row_mut(n).copy_from_slice(&keyed_fill(seed, n, &label, dim));
    }
    Features {
        source: FeatureSource::Table(t),
        params: ParamStore::new(),
        pretrain: None,
    }
}

/// Fused vectors of each node type as `gcl:<type>` tables, for runs that
/// skip contrastive pretraining but still export z.
pub fn fused_tables(graph: &KnowledgeGraph, bank: &FusionBank, params: &ParamStore) -> Result<Vec<EmbeddingTable>> {
    graph
        .node_types()
        .map(|ty| {
            let nodes = graph.nodes_of_type(ty);
            let u = bank.evaluate(params, nodes)?;
            EmbeddingTable::from_matrix(Modality::gcl(ty), nodes, &u)
        })
        .collect()
}
