//! Combines a node's modality vectors into one unified vector.
//!
//! All methods run batched on the tape: one `n x d` matrix per modality in,
//! one `n x D` matrix out. Parameters are kept per node type under
//! `fusion/<type>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, NodeType};
use crate::modality::{ModalityStore, ModalityView};
use crate::numerics::{glorot, indices, ParamStore, Rng64, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMethod {
    /// Unweighted mean of the modality vectors.
    None,
    Attention,
    Redaf,
}

impl FusionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::None => "none",
            FusionMethod::Attention => "attention",
            FusionMethod::Redaf => "redaf",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMethod::None),
            "attention" => Ok(FusionMethod::Attention),
            "redaf" => Ok(FusionMethod::Redaf),
            other => Err(Error::config(format!(
                "unknown fusion method `{other}` (none|attention|redaf)"
            ))),
        }
    }
}

/// Fused vector of one node with its per-member weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub u: Vec<f64>,
    pub weights: Vec<f64>,
    pub method: FusionMethod,
}

/// `(weighted + mean) / 2`, elementwise.
pub fn finalize_unified(weighted: &[f64], mean: &[f64]) -> Vec<f64> {
    weighted.iter().zip(mean).map(|(w, m)| 0.5 * (w + m)).collect()
}

/// Arithmetic mean of the view's vectors, weights `1/M`.
pub fn fuse_mean(view: &ModalityView) -> Result<FusedEmbedding> {
    if view.vectors.is_empty() {
        return Err(Error::contract("fuse_mean: empty modality view"));
    }
    let dim = view.dim();
    let m = view.m() as f64;
    let mut u = vec![0.0; dim];
    for (modality, v, _) in &view.vectors {
        if v.len() != dim {
            return Err(Error::contract(format!(
                "fuse_mean: {modality} has dim {}, expected {dim}",
                v.len()
            )));
        }
        for (o, x) in u.iter_mut().zip(v) {
            *o += x / m;
        }
    }
    Ok(FusedEmbedding {
        u,
        weights: vec![1.0 / m; view.m()],
        method: FusionMethod::None,
    })
}

/// Output of a batched fusion pass.
pub struct Fused {
    /// `n x D` unified vectors.
    pub u: Var,
    /// `n x members` weights; `None` for the mean method.
    pub weights: Option<Var>,
}

/// Fusion for one node type.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub method: FusionMethod,
    pub node_type: NodeType,
    pub num_modalities: usize,
    pub input_dim: usize,
    pub dim: usize,
    /// Adds the learnable per-node structural member `S`.
    pub structural: bool,
    prefix: String,
}

impl FusionModel {
    pub fn new(
        method: FusionMethod,
        node_type: NodeType,
        num_modalities: usize,
        input_dim: usize,
        dim: usize,
        structural: bool,
    ) -> Result<Self> {
        if num_modalities == 0 {
            return Err(Error::contract("fusion needs at least one modality"));
        }
        if method != FusionMethod::Attention && dim != input_dim {
            return Err(Error::config(format!(
                "{method} fusion keeps the input dim ({input_dim}); got output dim {dim}"
            )));
        }
        let prefix = format!("fusion/{}/", node_type.slug());
        Ok(FusionModel {
            method,
            node_type,
            num_modalities,
            input_dim,
            dim,
            structural,
            prefix,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}{leaf}", self.prefix)
    }

    pub fn members(&self) -> usize {
        self.num_modalities + usize::from(self.structural)
    }

    /// Adds this model's parameters to `store`. `structural_init` seeds the
    /// `S` table (one row per node of the type) when the structural member
    /// is enabled.
    pub fn init_params(
        &self,
        store: &mut ParamStore,
        rng: &mut Rng64,
        structural_init: Option<Tensor>,
    ) -> Result<()> {
        match self.method {
            FusionMethod::None => {}
            FusionMethod::Attention => {
                for m in 0..self.num_modalities {
                    store.insert(self.name(&format!("W{m}")), glorot(self.dim, self.input_dim, rng));
                }
                store.insert(self.name("q"), glorot(self.dim, 1, rng));
            }
            FusionMethod::Redaf => {
                store.insert(self.name("V"), glorot(self.input_dim, 1, rng));
                store.insert(self.name("zeta"), Tensor::scalar(0.0));
            }
        }
        if self.structural {
            let s = structural_init
                .ok_or_else(|| Error::contract("structural member enabled without an S init"))?;
            if s.cols() != self.dim {
                return Err(Error::contract(format!(
                    "S init has {} columns, fusion dim is {}",
                    s.cols(),
                    self.dim
                )));
            }
            store.insert(self.name("S"), s);
        }
        Ok(())
    }

    /// Fuses `inputs` (one `n x input_dim` matrix per modality, in store
    /// order). `s_rows` picks each row's entry of the `S` table.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        s_rows: Option<Arc<Vec<usize>>>,
    ) -> Result<Fused> {
        if inputs.len() != self.num_modalities {
            return Err(Error::contract(format!(
                "fusion for {} expects {} modalities, got {}",
                self.node_type,
                self.num_modalities,
                inputs.len()
            )));
        }
        for &x in inputs {
            if tape.shape(x).1 != self.input_dim {
                return Err(Error::contract(format!(
                    "fusion input has {} columns, expected {}",
                    tape.shape(x).1,
                    self.input_dim
                )));
            }
        }
        let mut members: Vec<Var> = match self.method {
            FusionMethod::Attention => {
                let mut hs = Vec::with_capacity(inputs.len());
                for (m, &x) in inputs.iter().enumerate() {
                    let w = tape.param(store, &self.name(&format!("W{m}")))?;
                    hs.push(tape.matmul_t(x, w)?);
                }
                hs
            }
            _ => inputs.to_vec(),
        };
        if self.structural {
            let rows = s_rows.ok_or_else(|| Error::contract("structural member needs S rows"))?;
            let s = tape.param(store, &self.name("S"))?;
            members.push(tape.gather_rows(s, rows)?);
        }

        let mut total = members[0];
        for &h in &members[1..] {
            total = tape.add(total, h)?;
        }
        let mean = tape.scale(total, 1.0 / members.len() as f64)?;

        let scores = match self.method {
            FusionMethod::None => return Ok(Fused { u: mean, weights: None }),
            FusionMethod::Attention => {
                let q = tape.param(store, &self.name("q"))?;
                let cols = members
                    .iter()
                    .map(|&h| tape.matmul(h, q))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_cols(&cols)?
            }
            FusionMethod::Redaf => {
                let v = tape.param(store, &self.name("V"))?;
                let mut cols = Vec::with_capacity(members.len());
                for &h in &members {
                    let t = tape.tanh(h)?;
                    cols.push(tape.matmul(t, v)?);
                }
                let raw = tape.concat_cols(&cols)?;
                let zeta = tape.param(store, &self.name("zeta"))?;
                let temperature = tape.sigmoid(zeta)?;
                tape.div(raw, temperature)?
            }
        };
        let weights = tape.softmax_rows(scores)?;
        let mut weighted = None;
        for (m, &h) in members.iter().enumerate() {
            let w = tape.slice_cols(weights, m, 1)?;
            let term = tape.mul(w, h)?;
            weighted = Some(match weighted {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let both = tape.add(weighted.unwrap(), mean)?;
        let u = tape.scale(both, 0.5)?;
        Ok(Fused {
            u,
            weights: Some(weights),
        })
    }

    /// Single-node evaluation returning the unified vector and weights.
    pub fn fuse_view(
        &self,
        view: &ModalityView,
        store: &ParamStore,
        s_row: Option<usize>,
    ) -> Result<FusedEmbedding> {
        if view.m() == 0 {
            return Err(Error::contract("empty modality view"));
        }
        let mut tape = Tape::new();
        let inputs = view
            .vectors
            .iter()
            .map(|(_, v, _)| tape.constant(Tensor::row_vector(v.clone())))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.forward(&mut tape, store, &inputs, s_row.map(|r| indices(vec![r])))?;
        let weights = match fused.weights {
            Some(w) => tape.value(w).data().to_vec(),
            None => vec![1.0 / self.members() as f64; self.members()],
        };
        Ok(FusedEmbedding {
            u: tape.value(fused.u).data().to_vec(),
            weights,
            method: self.method,
        })
    }
}

pub fn fuse_attention(view: &ModalityView, model: &FusionModel, store: &ParamStore) -> Result<FusedEmbedding> {
    if model.method != FusionMethod::Attention {
        return Err(Error::contract("fuse_attention needs an attention model"));
    }
    model.fuse_view(view, store, None)
}

pub fn fuse_redaf(
    view: &ModalityView,
    model: &FusionModel,
    store: &ParamStore,
    s_row: Option<usize>,
) -> Result<FusedEmbedding> {
    if model.method != FusionMethod::Redaf {
        return Err(Error::contract("fuse_redaf needs a ReDAF model"));
    }
    model.fuse_view(view, store, s_row)
}

/// One fusion model per node type plus a dense cache of every node's
/// modality slots, so batches can gather features without refilling.
#[derive(Clone, Debug)]
pub struct FusionBank {
    models: BTreeMap<NodeType, FusionModel>,
    /// Per modality, `num_nodes x input_dim`.
    cache: Vec<Tensor>,
    node_types: Vec<NodeType>,
    /// Position of each node within its type (row of that type's `S`).
    type_rank: Vec<usize>,
    dim: usize,
}

impl FusionBank {
    pub fn new(
        graph: &KnowledgeGraph,
        modalities: &ModalityStore,
        method: FusionMethod,
        dim: usize,
        structural: bool,
    ) -> Result<Self> {
        let all: Vec<usize> = (0..graph.num_nodes()).collect();
        let cache = modalities
            .modalities()
            .iter()
            .filter(|m| !(structural && **m == crate::modality::Modality::Structural))
            .map(|m| modalities.matrix(m, &all))
            .collect::<Vec<_>>();
        let mut models = BTreeMap::new();
        let mut type_rank = vec![0; graph.num_nodes()];
        for ty in graph.node_types() {
            for (i, &n) in graph.nodes_of_type(ty).iter().enumerate() {
                type_rank[n] = i;
            }
            models.insert(
                ty.clone(),
                FusionModel::new(method, ty.clone(), cache.len(), modalities.dim(), dim, structural)?,
            );
        }
        if cache.is_empty() {
            return Err(Error::config("structural member needs at least one other modality"));
        }
        Ok(FusionBank {
            models,
            cache,
            node_types: graph.type_of_each().into_iter().cloned().collect(),
            type_rank,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self, ty: &NodeType) -> Option<&FusionModel> {
        self.models.get(ty)
    }

    /// Initializes every type's parameters. With the structural member on,
    /// `S` starts from the structural modality slots of `modalities`.
    pub fn init_params(
        &self,
        graph: &KnowledgeGraph,
        modalities: &ModalityStore,
        store: &mut ParamStore,
        rng: &mut Rng64,
    ) -> Result<()> {
        for (ty, model) in &self.models {
            let s = model
                .structural
                .then(|| modalities.matrix(&crate::modality::Modality::Structural, graph.nodes_of_type(ty)));
            model.init_params(store, rng, s)?;
        }
        Ok(())
    }

    /// Raw modality slots of `nodes`, one matrix per fused modality.
    pub fn inputs(&self, nodes: &[usize]) -> Vec<Tensor> {
        self.cache.iter().map(|t| t.select_rows(nodes)).collect()
    }

    /// `nodes.len() x D` fused features, each node through its own type's
    /// model.
    pub fn forward_nodes(&self, tape: &mut Tape, store: &ParamStore, nodes: &[usize]) -> Result<Var> {
        let mut groups: BTreeMap<&NodeType, Vec<usize>> = BTreeMap::new();
        for (pos, &n) in nodes.iter().enumerate() {
            groups.entry(&self.node_types[n]).or_default().push(pos);
        }
        let mut out: Option<Var> = None;
        for (ty, positions) in groups {
            let model = &self.models[ty];
            let group: Vec<usize> = positions.iter().map(|&p| nodes[p]).collect();
            let inputs = self
                .inputs(&group)
                .into_iter()
                .map(|t| tape.constant(t))
                .collect::<Result<Vec<_>>>()?;
            let s_rows = model
                .structural
                .then(|| indices(group.iter().map(|&n| self.type_rank[n]).collect()));
            let fused = model.forward(tape, store, &inputs, s_rows)?;
            let placed = tape.scatter_add_rows(fused.u, indices(positions), nodes.len())?;
            out = Some(match out {
                None => placed,
                Some(acc) => tape.add(acc, placed)?,
            });
        }
        match out {
            Some(v) => Ok(v),
            None => tape.constant(Tensor::zeros(0, self.dim)),
        }
    }

    /// Fused features of `nodes` as a plain matrix.
    pub fn evaluate(&self, store: &ParamStore, nodes: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let u = self.forward_nodes(&mut tape, store, nodes)?;
        Ok(tape.value(u).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{Modality, Provenance};
    use crate::numerics::seeded_rng;
    use crate::testkit::{check_inputs, check_params, random_tensor};

    fn view(vectors: &[&[f64]]) -> ModalityView {
        ModalityView {
            node: 0,
            vectors: vectors
                .iter()
                .enumerate()
                .map(|(i, v)| (Modality::Custom(format!("m{i}")), v.to_vec(), Provenance::Loaded))
                .collect(),
        }
    }

    #[test]
    fn mean_examples() {
        let f = fuse_mean(&view(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap();
        assert_eq!(f.u, vec![2.0, 2.0]);
        assert_eq!(f.weights, vec![0.5, 0.5]);
        assert_eq!(fuse_mean(&view(&[&[4.0, -1.0]])).unwrap().u, vec![4.0, -1.0]);
        let v = [0.25, -7.0, 3.0];
        assert_eq!(fuse_mean(&view(&[&v, &v, &v, &v])).unwrap().u, v.to_vec());
        assert!(fuse_mean(&view(&[])).is_err());
    }

    #[test]
    fn finalize_examples() {
        assert_eq!(finalize_unified(&[1.0, 2.0], &[3.0, 0.0]), vec![2.0, 1.0]);
        let model = FusionModel::new(FusionMethod::None, NodeType::Drug, 2, 2, 2, false).unwrap();
        let v = view(&[&[1.0, 3.0], &[3.0, 1.0]]);
        let f = model.fuse_view(&v, &ParamStore::new(), None).unwrap();
        assert_eq!(f, fuse_mean(&v).unwrap());
    }

    fn attention(dim: usize, m: usize, seed: u64) -> (FusionModel, ParamStore) {
        let model = FusionModel::new(FusionMethod::Attention, NodeType::Drug, m, 3, dim, false).unwrap();
        let mut store = ParamStore::new();
        model.init_params(&mut store, &mut seeded_rng(seed), None).unwrap();
        (model, store)
    }

    #[test]
    fn attention_symmetry_cases() {
        let (model, mut store) = attention(4, 3, 1);
        let w0 = store.get("fusion/drug/W0").unwrap().clone();
        store.insert("fusion/drug/W1", w0.clone());
        store.insert("fusion/drug/W2", w0);
        let x = [0.3, -1.0, 2.0];
        let f = fuse_attention(&view(&[&x, &x, &x]), &model, &store).unwrap();
        for w in &f.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(f.u.len(), 4);

        let (model, mut store) = attention(4, 2, 2);
        store.insert("fusion/drug/q", Tensor::zeros(4, 1));
        let f = fuse_attention(&view(&[&[1.0, 0.0, 0.0], &[0.0, 9.0, -3.0]]), &model, &store).unwrap();
        assert_eq!(f.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (model, store) = attention(4, 2, 3);
        let mut rng = seeded_rng(9);
        let xs: Vec<Tensor> = (0..2).map(|_| random_tensor(5, 3, 1.0, &mut rng)).collect();
        let f = |tape: &mut Tape, s: &ParamStore| {
            let inputs = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let u = model.forward(tape, s, &inputs, None)?.u;
            let sq = tape.mul(u, u)?;
            tape.sum(sq)
        };
        let report = check_params(&store, f, None, &mut rng).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");

        let report = check_inputs(
            &xs,
            |tape, vars| {
                let u = model.forward(tape, &store, vars, None)?.u;
                let t = tape.tanh(u)?;
                tape.sum(t)
            },
            None,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    fn redaf(structural: bool, seed: u64) -> (FusionModel, ParamStore) {
        let model = FusionModel::new(FusionMethod::Redaf, NodeType::Disease, 2, 3, 3, structural).unwrap();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let s = structural.then(|| random_tensor(4, 3, 1.0, &mut rng));
        model.init_params(&mut store, &mut rng, s).unwrap();
        (model, store)
    }

    #[test]
    fn redaf_zero_gate_is_uniform() {
        let (model, mut store) = redaf(true, 1);
        store.insert("fusion/disease/V", Tensor::zeros(3, 1));
        let f = fuse_redaf(&view(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0]]), &model, &store, Some(2)).unwrap();
        for w in &f.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_temperature_sharpens() {
        let (model, mut store) = redaf(false, 4);
        let v = view(&[&[0.9, -0.2, 0.4], &[-0.5, 0.3, 0.1]]);
        let mut last = 0.0;
        for step in 0..40 {
            let zeta = 4.0 - step as f64 * 0.5;
            store.insert("fusion/disease/zeta", Tensor::scalar(zeta));
            let f = fuse_redaf(&v, &model, &store, None).unwrap();
            let top = f.weights.iter().cloned().fold(f64::MIN, f64::max);
            assert!(top >= last - 1e-15, "zeta {zeta}: {top} < {last}");
            last = top;
        }
    }

    #[test]
    fn redaf_weights_are_normalized() {
        let mut rng = seeded_rng(5);
        for trial in 0..100 {
            let (model, store) = redaf(trial % 2 == 0, trial);
            let x = random_tensor(1, 3, 2.0, &mut rng);
            let y = random_tensor(1, 3, 2.0, &mut rng);
            let f = fuse_redaf(&view(&[x.data(), y.data()]), &model, &store, Some(1)).unwrap();
            let sum: f64 = f.weights.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(f.weights.iter().all(|&w| w > 0.0 && w < 1.0));
        }
    }

    #[test]
    fn redaf_gradients_match_finite_differences() {
        let (model, store) = redaf(true, 6);
        let mut rng = seeded_rng(10);
        let xs: Vec<Tensor> = (0..2).map(|_| random_tensor(4, 3, 1.0, &mut rng)).collect();
        let rows = indices(vec![0, 1, 2, 3]);
        let f = |tape: &mut Tape, s: &ParamStore| {
            let inputs = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let u = model.forward(tape, s, &inputs, Some(rows.clone()))?.u;
            let sq = tape.mul(u, u)?;
            tape.sum(sq)
        };
        let report = check_params(&store, f, None, &mut rng).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn bank_matches_per_type_models() {
        let g = crate::graph::fixtures::small_graph();
        let mut ms = ModalityStore::new(3, 1, false);
        for t in crate::modality::mock_provider(&g, 1, 3) {
            ms.add_table(t).unwrap();
        }
        let bank = FusionBank::new(&g, &ms, FusionMethod::Attention, 3, false).unwrap();
        let mut store = ParamStore::new();
        bank.init_params(&g, &ms, &mut store, &mut seeded_rng(0)).unwrap();
        let nodes = [4, 0, 5, 1];
        let all = bank.evaluate(&store, &nodes).unwrap();
        for (i, &n) in nodes.iter().enumerate() {
            let single = bank
                .model(g.node_type(n))
                .unwrap()
                .fuse_view(&ms.get_modalities(n), &store, None)
                .unwrap();
            for (a, b) in all.row(i).iter().zip(&single.u) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
