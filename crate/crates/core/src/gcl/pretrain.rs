use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::augment::draw_augmentation;
use super::encoder::{normalized_adjacency, GcnEncoder, GraceHead};
use super::losses::{dgi_loss, ggd_loss, info_nce};
use super::{GclConfig, GclMethod};
use crate::error::{Error, Result};
use crate::fusion::FusionBank;
use crate::graph::{homogeneous_subgraph, KnowledgeGraph, NodeType};
use crate::modality::{keyed_fill, EmbeddingTable, Modality};
use crate::numerics::{
    indices, optimizer_step, seeded_rng, sub_seed, ParamStore, Rng64, SparseMatrix, Tape, Tensor, Var,
};

/// Pretraining result for one node type.
#[derive(Clone, Debug)]
pub struct TypeModel {
    pub node_type: NodeType,
    /// Graph node id of each row of `z`.
    pub parent_ids: Vec<usize>,
    pub z: Tensor,
    /// `(step, loss)` for every optimizer step.
    pub curve: Vec<(usize, f64)>,
    pub epochs_run: usize,
    pub best_epoch_loss: Option<f64>,
    /// No same-type edges: propagation used the identity.
    pub identity_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    /// Encoders, heads and the jointly trained fusion parameters of every
    /// type.
    pub params: ParamStore,
    pub types: Vec<TypeModel>,
    pub out_dim: usize,
}

impl PretrainOutput {
    pub fn z_tables(&self) -> Result<Vec<EmbeddingTable>> {
        self.types
            .iter()
            .map(|t| EmbeddingTable::from_matrix(Modality::gcl(&t.node_type), &t.parent_ids, &t.z))
            .collect()
    }

    pub fn curve(&self, ty: &NodeType) -> Option<&[(usize, f64)]> {
        self.types
            .iter()
            .find(|t| &t.node_type == ty)
            .map(|t| t.curve.as_slice())
    }
}

/// Optimizer-step loss curve as `step,loss` CSV.
pub fn write_curve(curve: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (s, l) in curve {
        let _ = writeln!(out, "{s},{l}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct TypeJob<'a> {
    node_type: NodeType,
    parent_ids: Vec<usize>,
    edges: Vec<(usize, usize)>,
    bank: &'a FusionBank,
    encoder: GcnEncoder,
    head: Option<GraceHead>,
    cfg: &'a GclConfig,
}

impl TypeJob<'_> {
    fn fused(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        self.bank.forward_nodes(tape, store, &self.parent_ids)
    }

    fn view_inputs(
        &self,
        tape: &mut Tape,
        u: Var,
        rng: &mut Rng64,
    ) -> Result<(Var, Arc<SparseMatrix>)> {
        let n = self.parent_ids.len();
        let (masked, kept) = draw_augmentation(n, &self.edges, self.cfg.p_mask, self.cfg.p_drop, rng)?;
        let mut keep = vec![1.0; n];
        for m in masked {
            keep[m] = 0.0;
        }
        let keep = tape.constant(Tensor::col_vector(keep))?;
        let x = tape.mul(u, keep)?;
        Ok((x, Arc::new(normalized_adjacency(n, &kept))))
    }

    fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adj: &Arc<SparseMatrix>,
        pairs: &[(usize, usize)],
        rng: &mut Rng64,
    ) -> Result<Var> {
        let u = self.fused(tape, store)?;
        let n = self.parent_ids.len();
        match self.cfg.method {
            GclMethod::Dgi => {
                let real = self.encoder.encode(tape, store, adj, u)?;
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                let shuffled = tape.gather_rows(u, indices(perm))?;
                let fake = self.encoder.encode(tape, store, adj, shuffled)?;
                dgi_loss(tape, real, fake)
            }
            GclMethod::GgdPaper => {
                let h = self.encoder.encode(tape, store, adj, u)?;
                let negatives = sample_non_edges(n, pairs, rng);
                ggd_loss(tape, h, pairs, &negatives)
            }
            GclMethod::Grace => {
                let head = self.head.as_ref().expect("grace job has a head");
                let (x1, a1) = self.view_inputs(tape, u, rng)?;
                let (x2, a2) = self.view_inputs(tape, u, rng)?;
                let h1 = self.encoder.encode(tape, store, &a1, x1)?;
                let h2 = self.encoder.encode(tape, store, &a2, x2)?;
                let p1 = head.project(tape, store, h1)?;
                let p2 = head.project(tape, store, h2)?;
                let p1 = tape.row_normalize(p1)?;
                let p2 = tape.row_normalize(p2)?;
                info_nce(tape, p1, p2, head.tau, self.cfg.intra_view_negatives)
            }
            GclMethod::None => Err(Error::contract("pretraining with gcl = none")),
        }
    }

    fn run(&self, mut store: ParamStore, seed: u64) -> Result<(TypeModel, ParamStore)> {
        let n = self.parent_ids.len();
        let adj = Arc::new(normalized_adjacency(n, &self.edges));
        let pairs = undirected_pairs(&self.edges);
        let identity_fallback = pairs.is_empty();
        if identity_fallback {
            log::warn!(
                "{}: no same-type edges; GCN propagation falls back to the identity",
                self.node_type
            );
        }
        let trainable = !(self.cfg.method == GclMethod::GgdPaper && pairs.is_empty())
            && !(self.cfg.method == GclMethod::Dgi && n < 2);
        if !trainable {
            log::warn!(
                "{}: {} has no training signal on this subgraph; exporting the untrained encoder",
                self.node_type,
                self.cfg.method
            );
        }

        let optim = &self.cfg.optim;
        let total_steps = optim.epochs * self.cfg.steps_per_epoch;
        let mut curve = Vec::new();
        let mut best: Option<(f64, ParamStore)> = None;
        let mut stale = 0;
        let mut epochs_run = 0;
        let mut step = 0;
        while trainable && epochs_run < optim.epochs {
            let mut epoch_loss = 0.0;
            for _ in 0..self.cfg.steps_per_epoch {
                let mut rng = seeded_rng(sub_seed(seed, "gcl/step", step as u64));
                let mut tape = Tape::new();
                let loss = self.loss(&mut tape, &store, &adj, &pairs, &mut rng)?;
                let value = tape.value(loss).item()?;
                let grads = tape.backward(loss)?;
                store.zero_grad();
                grads.accumulate_into(&tape, &mut store)?;
                optimizer_step(&mut store, optim, total_steps)?;
                curve.push((step, value));
                epoch_loss += value;
                step += 1;
            }
            epochs_run += 1;
            epoch_loss /= self.cfg.steps_per_epoch as f64;
            match &best {
                Some((b, _)) if epoch_loss >= *b => {
                    stale += 1;
                    if stale >= optim.patience {
                        log::info!("{}: loss plateau after {epochs_run} epochs", self.node_type);
                        break;
                    }
                }
                _ => {
                    stale = 0;
                    best = Some((epoch_loss, store.extract_prefix("")));
                }
            }
        }
        let best_epoch_loss = best.as_ref().map(|b| b.0);
        let final_params = match best {
            Some((_, p)) => p,
            None => store.extract_prefix(""),
        };

        let mut tape = Tape::new();
        let u = self.fused(&mut tape, &final_params)?;
        let z = self.encoder.encode(&mut tape, &final_params, &adj, u)?;
        let z = tape.value(z).clone();
        Ok((
            TypeModel {
                node_type: self.node_type.clone(),
                parent_ids: self.parent_ids.clone(),
                z,
                curve,
                epochs_run,
                best_epoch_loss,
                identity_fallback,
            },
            final_params,
        ))
    }
}

/// Each undirected non-loop edge once, as `(min, max)`.
fn undirected_pairs(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    edges
        .iter()
        .filter(|(a, b)| a != b)
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .filter(|p| seen.insert(*p))
        .collect()
}

/// Uniform non-edges, one per positive; a slot that keeps hitting edges
/// after 100 draws is skipped.
fn sample_non_edges(n: usize, positives: &[(usize, usize)], rng: &mut Rng64) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let edges: HashSet<(usize, usize)> = positives.iter().copied().collect();
    let mut out = Vec::with_capacity(positives.len());
    for _ in positives {
        for _ in 0..100 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b && !edges.contains(&(a.min(b), a.max(b))) {
                out.push((a, b));
                break;
            }
        }
    }
    out
}

/// Pretrains one encoder per node type on that type's homogeneous subgraph
/// of `graph`, training the type's fusion parameters jointly. Types run in
/// parallel on up to `threads` workers; results do not depend on the count.
pub fn pretrain(
    graph: &KnowledgeGraph,
    bank: &FusionBank,
    fusion_params: &ParamStore,
    cfg: &GclConfig,
    seed: u64,
    threads: usize,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if cfg.method == GclMethod::None {
        return Err(Error::config("pretrain needs a gcl method other than none"));
    }
    let mut jobs = Vec::new();
    for ty in graph.node_types() {
        let sub = homogeneous_subgraph(graph, ty);
        if sub.num_nodes() == 0 {
            continue;
        }
        let prefix = format!("gcl/{}/", ty.slug());
        let encoder = GcnEncoder::new(prefix.clone(), bank.dim(), cfg.hidden_dim, cfg.out_dim);
        let head = (cfg.method == GclMethod::Grace).then(|| GraceHead::new(prefix, cfg.out_dim, cfg.tau));
        jobs.push(TypeJob {
            node_type: ty.clone(),
            edges: sub.edge_pairs(),
            parent_ids: sub.parent_ids,
            bank,
            encoder,
            head,
            cfg,
        });
    }

    let run = |job: &TypeJob| -> Result<(TypeModel, ParamStore)> {
        let slug = job.node_type.slug();
        let fusion_prefix = bank
            .model(&job.node_type)
            .map(|m| m.prefix().to_string())
            .unwrap_or_default();
        let mut store = fusion_params.extract_prefix(&fusion_prefix);
        if fusion_prefix.is_empty() {
            store = ParamStore::new();
        }
        let mut rng = seeded_rng(sub_seed(seed, &format!("gcl/init/{slug}"), 0));
        job.encoder.init_params(&mut store, &mut rng);
        if let Some(head) = &job.head {
            head.init_params(&mut store, &mut rng);
        }
        job.run(store, sub_seed(seed, &format!("gcl/train/{slug}"), 0))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(TypeModel, ParamStore)>> = pool.install(|| jobs.par_iter().map(run).collect());

    let mut params = fusion_params.clone();
    let mut types = Vec::with_capacity(results.len());
    for r in results {
        let (model, store) = r?;
        params.merge(&store);
        types.push(model);
    }
    Ok(PretrainOutput {
        params: params.extract_prefix(""),
        types,
        out_dim: cfg.out_dim,
    })
}

impl PretrainOutput {
    /// `num_nodes x k` feature matrix for the link predictor: each node's z
    /// row, or a keyed fill under `gcl:<type>` if its type was not
    /// pretrained.
    pub fn feature_matrix(&self, graph: &KnowledgeGraph, seed: u64) -> Tensor {
        let k = self.out_dim;
        let mut out = Tensor::zeros(graph.num_nodes(), k);
        let mut filled = vec![false; graph.num_nodes()];
        for t in &self.types {
            for (row, &n) in t.parent_ids.iter().enumerate() {
                out.row_mut(n).copy_from_slice(t.z.row(row));
                filled[n] = true;
            }
        }
        for (n, done) in filled.iter().enumerate() {
            if !done {
                let fill = keyed_fill(seed, n, &Modality::gcl(graph.node_type(n)), k);
                out.row_mut(n).copy_from_slice(&fill);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMethod;
    use crate::graph::fixtures::node;
    use crate::graph::Triple;
    use crate::modality::{mock_provider, ModalityStore};
    use crate::numerics::OptimConfig;

    /// Two drug communities of ten joined internally, plus a protein ring
    /// and some cross-type edges.
    fn community_graph() -> KnowledgeGraph {
        let mut nodes: Vec<_> = (0..20).map(|i| node(i, NodeType::Drug)).collect();
        nodes.extend((20..30).map(|i| node(i, NodeType::GeneProtein)));
        let mut triples = Vec::new();
        for c in 0..2 {
            for i in 0..10 {
                for j in (i + 1)..10 {
                    if (i + j) % 3 == 0 {
                        triples.push(Triple::new(c * 10 + i, 0, c * 10 + j));
                    }
                }
            }
        }
        for i in 0..10 {
            triples.push(Triple::new(20 + i, 1, 20 + (i + 1) % 10));
            triples.push(Triple::new(i, 2, 20 + i));
        }
        KnowledgeGraph::new(
            nodes,
            vec!["dd".into(), "pp".into(), "dp".into()],
            triples,
        )
        .unwrap()
    }

    fn setup(g: &KnowledgeGraph, method: FusionMethod) -> (FusionBank, ParamStore) {
        let mut ms = ModalityStore::new(8, 1, false);
        for t in mock_provider(g, 1, 8) {
            ms.add_table(t).unwrap();
        }
        let bank = FusionBank::new(g, &ms, method, 8, false).unwrap();
        let mut store = ParamStore::new();
        bank.init_params(g, &ms, &mut store, &mut seeded_rng(2)).unwrap();
        (bank, store)
    }

    fn cfg(method: GclMethod, epochs: usize) -> GclConfig {
        GclConfig {
            method,
            hidden_dim: 16,
            out_dim: 8,
            steps_per_epoch: 5,
            optim: OptimConfig {
                learning_rate: 0.01,
                epochs,
                warmup_steps: 5,
                patience: 1000,
                ..OptimConfig::default()
            },
            ..GclConfig::default()
        }
    }

    fn mean(xs: &[(usize, f64)]) -> f64 {
        xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn every_method_descends_and_exports_shapes() {
        let g = community_graph();
        for method in [GclMethod::Dgi, GclMethod::GgdPaper, GclMethod::Grace] {
            let (bank, store) = setup(&g, FusionMethod::Attention);
            let out = pretrain(&g, &bank, &store, &cfg(method, 10), 5, 2).unwrap();
            for t in &out.types {
                assert_eq!(t.z.rows(), g.nodes_of_type(&t.node_type).len());
                assert_eq!(t.z.cols(), 8);
                let c = &t.curve;
                let head = mean(&c[..5]);
                let tail = mean(&c[c.len() - 5..]);
                assert!(tail < head, "{method} on {}: {head} -> {tail}", t.node_type);
            }
            // fusion weights moved with the encoder
            assert_ne!(
                out.params.get("fusion/drug/q").unwrap(),
                store.get("fusion/drug/q").unwrap()
            );
        }
    }

    #[test]
    fn deterministic_and_thread_count_independent() {
        let g = community_graph();
        let (bank, store) = setup(&g, FusionMethod::Redaf);
        let a = pretrain(&g, &bank, &store, &cfg(GclMethod::Grace, 3), 9, 1).unwrap();
        let b = pretrain(&g, &bank, &store, &cfg(GclMethod::Grace, 3), 9, 4).unwrap();
        for (x, y) in a.types.iter().zip(&b.types) {
            assert_eq!(x.z, y.z);
        }
    }

    #[test]
    fn cross_type_edges_are_never_read() {
        let g = community_graph();
        let same_type: Vec<usize> = g
            .triples()
            .iter()
            .enumerate()
            .filter(|(_, t)| g.node_type(t.head) == g.node_type(t.tail))
            .map(|(i, _)| i)
            .collect();
        let stripped = g.with_triples(&same_type);
        let (bank, store) = setup(&g, FusionMethod::None);
        let a = pretrain(&g, &bank, &store, &cfg(GclMethod::Dgi, 3), 1, 1).unwrap();
        let b = pretrain(&stripped, &bank, &store, &cfg(GclMethod::Dgi, 3), 1, 1).unwrap();
        for (x, y) in a.types.iter().zip(&b.types) {
            assert_eq!(x.z, y.z);
        }
    }

    #[test]
    fn edgeless_type_falls_back_to_identity() {
        let g = community_graph();
        let no_pp: Vec<usize> = g
            .triples()
            .iter()
            .enumerate()
            .filter(|(_, t)| g.relation_name(t.relation) != "pp")
            .map(|(i, _)| i)
            .collect();
        let g = g.with_triples(&no_pp);
        let (bank, store) = setup(&g, FusionMethod::None);
        let out = pretrain(&g, &bank, &store, &cfg(GclMethod::GgdPaper, 2), 1, 1).unwrap();
        let proteins = out
            .types
            .iter()
            .find(|t| t.node_type == NodeType::GeneProtein)
            .unwrap();
        assert!(proteins.identity_fallback);
        assert!(proteins.curve.is_empty());
        assert!(proteins.z.is_finite());
    }

    #[test]
    fn feature_matrix_places_rows() {
        let g = community_graph();
        let (bank, store) = setup(&g, FusionMethod::None);
        let out = pretrain(&g, &bank, &store, &cfg(GclMethod::Dgi, 2), 1, 1).unwrap();
        let x = out.feature_matrix(&g, 0);
        let drugs = out.types.iter().find(|t| t.node_type == NodeType::Drug).unwrap();
        assert_eq!(x.row(drugs.parent_ids[3]), drugs.z.row(3));
        assert_eq!(out.z_tables().unwrap().len(), 2);
    }
}
