//! Finite-difference cases for every differentiable tape op and every loss.
//! Each case draws fresh random inputs from the generator it is handed, so
//! running a case `k` times probes `k` random points.

use std::sync::Arc;

use rand::Rng;

use super::{check_inputs, check_params, random_tensor, GradReport};
use crate::fusion::{FusionBank, FusionMethod, FusionModel};
use crate::gcl::{dgi_loss, ggd_loss, info_nce, normalized_adjacency, GcnEncoder, GraceHead};
use crate::graph::{KnowledgeGraph, NodeRecord, NodeType, Triple};
use crate::kge::{distmult_logits, kge_loss, RelationAdjacency, Rgcn, Z_NAME};
use crate::modality::{mock_provider, ModalityStore};
use crate::numerics::{dropout_mask, indices, seeded_rng, ParamStore, Rng64, SparseMatrix, Tape, Tensor, Var};
use crate::Result;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(&mut Rng64) -> Result<GradReport>,
}

/// Fixed non-uniform weights so that every output entry reaches the loss
/// with a different coefficient, plus a square term for curvature.
fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    let (r, c) = tape.shape(y);
    let mut w = Tensor::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            w.set(i, j, 1.0 + 0.37 * i as f64 - 0.53 * j as f64);
        }
    }
    let w = tape.constant(w)?;
    let lin = tape.mul(y, w)?;
    let sq = tape.mul(y, y)?;
    let both = tape.add(lin, sq)?;
    tape.sum(both)
}

fn positive(rows: usize, cols: usize, rng: &mut Rng64) -> Tensor {
    random_tensor(rows, cols, 1.0, rng).map(|v| v.abs() + 0.5)
}

fn unary(rng: &mut Rng64, x: Tensor, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradReport> {
    check_inputs(
        &[x],
        |tape, v| {
            let y = op(tape, v[0])?;
            readout(tape, y)
        },
        None,
        rng,
    )
}

fn binary(rng: &mut Rng64, a: Tensor, b: Tensor, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<GradReport> {
    check_inputs(
        &[a, b],
        |tape, v| {
            let y = op(tape, v[0], v[1])?;
            readout(tape, y)
        },
        None,
        rng,
    )
}

fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            run: |rng| {
                let (a, b) = (random_tensor(3, 4, 1.0, rng), random_tensor(4, 2, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.matmul(a, b))
            },
        },
        GradCase {
            name: "matmul_t",
            run: |rng| {
                let (a, b) = (random_tensor(3, 4, 1.0, rng), random_tensor(2, 4, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.matmul_t(a, b))
            },
        },
        GradCase {
            name: "transpose",
            run: |rng| {
                let a = random_tensor(3, 2, 1.0, rng);
                unary(rng, a, |t, a| t.transpose(a))
            },
        },
        GradCase {
            name: "spmm",
            run: |rng| {
                let mut entries = Vec::new();
                for r in 0..4 {
                    for c in 0..3 {
                        if rng.random::<f64>() < 0.6 {
                            entries.push((r, c, rng.random_range(-1.0..1.0)));
                        }
                    }
                }
                let m = Arc::new(SparseMatrix::from_triplets(4, 3, entries));
                let x = random_tensor(3, 2, 1.0, rng);
                check_inputs(
                    &[x],
                    |tape, v| {
                        let y = tape.spmm(&m, v[0])?;
                        readout(tape, y)
                    },
                    None,
                    rng,
                )
            },
        },
        GradCase {
            name: "add (row broadcast)",
            run: |rng| {
                let (a, b) = (random_tensor(3, 2, 1.0, rng), random_tensor(1, 2, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.add(a, b))
            },
        },
        GradCase {
            name: "sub",
            run: |rng| {
                let (a, b) = (random_tensor(3, 2, 1.0, rng), random_tensor(3, 2, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.sub(a, b))
            },
        },
        GradCase {
            name: "mul (column broadcast)",
            run: |rng| {
                let (a, b) = (random_tensor(3, 2, 1.0, rng), random_tensor(3, 1, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.mul(a, b))
            },
        },
        GradCase {
            name: "div",
            run: |rng| {
                let (a, b) = (random_tensor(3, 2, 1.0, rng), positive(3, 2, rng));
                binary(rng, a, b, |t, a, b| t.div(a, b))
            },
        },
        GradCase {
            name: "scale",
            run: |rng| {
                let a = random_tensor(2, 3, 1.0, rng);
                unary(rng, a, |t, a| t.scale(a, -1.7))
            },
        },
        GradCase {
            name: "add_scalar",
            run: |rng| {
                let a = random_tensor(2, 3, 1.0, rng);
                unary(rng, a, |t, a| t.add_scalar(a, 0.3))
            },
        },
        GradCase {
            name: "relu",
            run: |rng| {
                let a = random_tensor(3, 3, 1.0, rng);
                unary(rng, a, |t, a| t.relu(a))
            },
        },
        GradCase {
            name: "tanh",
            run: |rng| {
                let a = random_tensor(3, 3, 2.0, rng);
                unary(rng, a, |t, a| t.tanh(a))
            },
        },
        GradCase {
            name: "sigmoid",
            run: |rng| {
                let a = random_tensor(3, 3, 3.0, rng);
                unary(rng, a, |t, a| t.sigmoid(a))
            },
        },
        GradCase {
            name: "exp",
            run: |rng| {
                let a = random_tensor(3, 3, 1.0, rng);
                unary(rng, a, |t, a| t.exp(a))
            },
        },
        GradCase {
            name: "log",
            run: |rng| {
                let a = positive(3, 3, rng);
                unary(rng, a, |t, a| t.log(a))
            },
        },
        GradCase {
            name: "softplus",
            run: |rng| {
                let a = random_tensor(3, 3, 3.0, rng);
                unary(rng, a, |t, a| t.softplus(a))
            },
        },
        GradCase {
            name: "dropout",
            run: |rng| {
                let a = random_tensor(3, 4, 1.0, rng);
                let mask = dropout_mask(12, 0.3, rng);
                check_inputs(
                    &[a],
                    |tape, v| {
                        let y = tape.dropout_with_mask(v[0], mask.clone())?;
                        readout(tape, y)
                    },
                    None,
                    rng,
                )
            },
        },
        GradCase {
            name: "softmax_rows",
            run: |rng| {
                let a = random_tensor(3, 4, 2.0, rng);
                unary(rng, a, |t, a| t.softmax_rows(a))
            },
        },
        GradCase {
            name: "logsumexp_rows",
            run: |rng| {
                let a = random_tensor(3, 4, 2.0, rng);
                unary(rng, a, |t, a| t.logsumexp_rows(a))
            },
        },
        GradCase {
            name: "row_normalize",
            run: |rng| {
                let a = random_tensor(3, 4, 1.0, rng);
                unary(rng, a, |t, a| t.row_normalize(a))
            },
        },
        GradCase {
            name: "sum",
            run: |rng| {
                let a = random_tensor(3, 2, 1.0, rng);
                unary(rng, a, |t, a| t.sum(a))
            },
        },
        GradCase {
            name: "mean",
            run: |rng| {
                let a = random_tensor(3, 2, 1.0, rng);
                unary(rng, a, |t, a| t.mean(a))
            },
        },
        GradCase {
            name: "sum_rows",
            run: |rng| {
                let a = random_tensor(3, 2, 1.0, rng);
                unary(rng, a, |t, a| t.sum_rows(a))
            },
        },
        GradCase {
            name: "mean_rows",
            run: |rng| {
                let a = random_tensor(3, 2, 1.0, rng);
                unary(rng, a, |t, a| t.mean_rows(a))
            },
        },
        GradCase {
            name: "sum_cols",
            run: |rng| {
                let a = random_tensor(3, 2, 1.0, rng);
                unary(rng, a, |t, a| t.sum_cols(a))
            },
        },
        GradCase {
            name: "concat_cols",
            run: |rng| {
                let (a, b) = (random_tensor(3, 2, 1.0, rng), random_tensor(3, 1, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.concat_cols(&[a, b, a]))
            },
        },
        GradCase {
            name: "concat_rows",
            run: |rng| {
                let (a, b) = (random_tensor(2, 3, 1.0, rng), random_tensor(1, 3, 1.0, rng));
                binary(rng, a, b, |t, a, b| t.concat_rows(&[b, a, b]))
            },
        },
        GradCase {
            name: "slice_cols",
            run: |rng| {
                let a = random_tensor(3, 4, 1.0, rng);
                unary(rng, a, |t, a| t.slice_cols(a, 1, 2))
            },
        },
        GradCase {
            name: "gather_rows",
            run: |rng| {
                let a = random_tensor(4, 2, 1.0, rng);
                unary(rng, a, |t, a| t.gather_rows(a, indices(vec![3, 0, 3, 1])))
            },
        },
        GradCase {
            name: "scatter_add_rows",
            run: |rng| {
                let a = random_tensor(4, 2, 1.0, rng);
                unary(rng, a, |t, a| t.scatter_add_rows(a, indices(vec![2, 0, 2, 4]), 5))
            },
        },
        GradCase {
            name: "bce_with_logits",
            run: |rng| {
                let a = random_tensor(6, 1, 3.0, rng);
                let labels: Vec<f64> = (0..6).map(|_| f64::from(rng.random::<bool>())).collect();
                check_inputs(&[a], |tape, v| tape.bce_with_logits(v[0], labels.clone()), None, rng)
            },
        },
    ]
}

/// `jsd(softmax(a), softmax(b))` over row vectors.
fn jsd_case(rng: &mut Rng64) -> Result<GradReport> {
    let (a, b) = (random_tensor(1, 5, 2.0, rng), random_tensor(1, 5, 2.0, rng));
    check_inputs(
        &[a, b],
        |tape, v| {
            let p = tape.softmax_rows(v[0])?;
            let q = tape.softmax_rows(v[1])?;
            tape.jsd(p, q)
        },
        None,
        rng,
    )
}

fn fusion_inputs(m: usize, rows: usize, dim: usize, rng: &mut Rng64) -> Vec<Tensor> {
    (0..m).map(|_| random_tensor(rows, dim, 1.0, rng)).collect()
}

fn attention_case(rng: &mut Rng64) -> Result<GradReport> {
    let model = FusionModel::new(FusionMethod::Attention, NodeType::Drug, 3, 3, 4, false)?;
    let mut store = ParamStore::new();
    model.init_params(&mut store, rng, None)?;
    let xs = fusion_inputs(3, 4, 3, rng);
    let mut report = check_params(
        &store,
        |tape, s| {
            let inputs = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let u = model.forward(tape, s, &inputs, None)?.u;
            readout(tape, u)
        },
        None,
        rng,
    )?;
    let wrt_inputs = check_inputs(
        &xs,
        |tape, vars| {
            let u = model.forward(tape, &store, vars, None)?.u;
            readout(tape, u)
        },
        None,
        rng,
    )?;
    report.max_rel_err = report.max_rel_err.max(wrt_inputs.max_rel_err);
    report.coords += wrt_inputs.coords;
    Ok(report)
}

fn redaf_case(rng: &mut Rng64) -> Result<GradReport> {
    let model = FusionModel::new(FusionMethod::Redaf, NodeType::Disease, 2, 3, 3, true)?;
    let mut store = ParamStore::new();
    let s = random_tensor(4, 3, 1.0, rng);
    model.init_params(&mut store, rng, Some(s))?;
    store.insert("fusion/disease/zeta", Tensor::scalar(rng.random_range(-2.0..2.0)));
    let xs = fusion_inputs(2, 4, 3, rng);
    let rows = indices(vec![2, 0, 3, 1]);
    check_params(
        &store,
        |tape, s| {
            let inputs = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let u = model.forward(tape, s, &inputs, Some(rows.clone()))?.u;
            readout(tape, u)
        },
        None,
        rng,
    )
}

/// A 5-node ring with one chord.
fn small_adjacency() -> Arc<SparseMatrix> {
    Arc::new(normalized_adjacency(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]))
}

fn encoder(rng: &mut Rng64) -> (GcnEncoder, ParamStore) {
    let enc = GcnEncoder::new("t/", 3, 4, 3);
    let mut store = ParamStore::new();
    enc.init_params(&mut store, rng);
    // Nonzero biases keep ReLU units away from the all-zero corner.
    for l in 0..2 {
        let o = if l == 0 { 4 } else { 3 };
        store.insert(format!("t/enc/layer{l}/b"), random_tensor(1, o, 0.5, rng));
    }
    (enc, store)
}

fn dgi_case(rng: &mut Rng64) -> Result<GradReport> {
    let (enc, store) = encoder(rng);
    let adj = small_adjacency();
    let x = random_tensor(5, 3, 1.0, rng);
    let corrupt = x.select_rows(&[3, 0, 4, 1, 2]);
    check_params(
        &store,
        |tape, s| {
            let xv = tape.constant(x.clone())?;
            let cv = tape.constant(corrupt.clone())?;
            let h = enc.encode(tape, s, &adj, xv)?;
            let hc = enc.encode(tape, s, &adj, cv)?;
            dgi_loss(tape, h, hc)
        },
        None,
        rng,
    )
}

fn ggd_case(rng: &mut Rng64) -> Result<GradReport> {
    let (enc, store) = encoder(rng);
    let adj = small_adjacency();
    let x = random_tensor(5, 3, 1.0, rng);
    check_params(
        &store,
        |tape, s| {
            let xv = tape.constant(x.clone())?;
            let h = enc.encode(tape, s, &adj, xv)?;
            ggd_loss(tape, h, &[(0, 1), (1, 2), (3, 4)], &[(0, 3), (1, 4), (2, 4)])
        },
        None,
        rng,
    )
}

fn grace_case(rng: &mut Rng64) -> Result<GradReport> {
    let (enc, mut store) = encoder(rng);
    let head = GraceHead::new("t/", 3, 0.5);
    head.init_params(&mut store, rng);
    for l in 0..2 {
        store.insert(format!("t/proj/b{l}"), random_tensor(1, 3, 0.5, rng));
    }
    let adj = small_adjacency();
    let view_adj = Arc::new(normalized_adjacency(5, &[(0, 1), (2, 3), (4, 0)]));
    let x1 = random_tensor(5, 3, 1.0, rng);
    let x2 = random_tensor(5, 3, 1.0, rng);
    let intra = rng.random::<bool>();
    check_params(
        &store,
        |tape, s| {
            let a = tape.constant(x1.clone())?;
            let b = tape.constant(x2.clone())?;
            let h1 = enc.encode(tape, s, &adj, a)?;
            let h2 = enc.encode(tape, s, &view_adj, b)?;
            let p1 = head.project(tape, s, h1)?;
            let p2 = head.project(tape, s, h2)?;
            let p1 = tape.row_normalize(p1)?;
            let p2 = tape.row_normalize(p2)?;
            info_nce(tape, p1, p2, head.tau, intra)
        },
        None,
        rng,
    )
}

/// Drugs 0..3 and proteins 3..6 over three relations.
pub fn six_node_graph() -> KnowledgeGraph {
    let nodes = (0..6)
        .map(|id| NodeRecord {
            id,
            external_id: format!("N{id}"),
            node_type: if id < 3 { NodeType::Drug } else { NodeType::GeneProtein },
            subtype: None,
            name: format!("node {id}"),
        })
        .collect();
    let relations = ["drug_drug", "drug_protein", "protein_protein"]
        .map(String::from)
        .to_vec();
    let triples = vec![
        Triple::new(0, 0, 1),
        Triple::new(1, 0, 2),
        Triple::new(0, 1, 3),
        Triple::new(1, 1, 4),
        Triple::new(2, 1, 5),
        Triple::new(3, 2, 4),
        Triple::new(4, 2, 5),
    ];
    KnowledgeGraph::new(nodes, relations, triples).expect("valid fixture")
}

/// Full link-prediction loss: attention fusion over two modalities, a
/// two-layer RGCN with dropout, DistMult logits, BCE and the embedding
/// penalty.
fn kge_case(rng: &mut Rng64) -> Result<GradReport> {
    let g = six_node_graph();
    let mut ms = ModalityStore::new(3, rng.random(), false);
    for t in mock_provider(&g, rng.random(), 3) {
        ms.add_table(t)?;
    }
    let bank = FusionBank::new(&g, &ms, FusionMethod::Attention, 4, false)?;
    let mut store = ParamStore::new();
    bank.init_params(&g, &ms, &mut store, rng)?;
    let rgcn = Rgcn::new(3, 4, 5, 3, 0.2);
    rgcn.init_params(&mut store, rng);
    for l in 0..2 {
        let o = if l == 0 { 5 } else { 3 };
        store.insert(Rgcn::bias_name(l), random_tensor(1, o, 0.5, rng));
    }
    store.insert(Z_NAME, random_tensor(3, 3, 1.0, rng));
    let adj = RelationAdjacency::new(6, 3, g.triples())?;
    let pos = g.triples().to_vec();
    let neg = vec![
        Triple::new(2, 0, 0),
        Triple::new(0, 1, 5),
        Triple::new(2, 1, 3),
        Triple::new(5, 2, 3),
    ];
    let mask_seed: u64 = rng.random();
    let nodes: Vec<usize> = (0..6).collect();
    check_params(
        &store,
        |tape, s| {
            let x0 = bank.forward_nodes(tape, s, &nodes)?;
            let x = rgcn.forward(tape, s, &adj, x0, true, &mut seeded_rng(mask_seed))?;
            let z = tape.param(s, Z_NAME)?;
            let pl = distmult_logits(tape, x, z, &pos)?;
            let nl = distmult_logits(tape, x, z, &neg)?;
            kge_loss(tape, pl, nl, x, z, 0.01, 1.0)
        },
        None,
        rng,
    )
}

/// Every op case followed by the loss cases.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend([
        GradCase {
            name: "jsd",
            run: jsd_case,
        },
        GradCase {
            name: "attention fusion",
            run: attention_case,
        },
        GradCase {
            name: "redaf fusion",
            run: redaf_case,
        },
        GradCase {
            name: "dgi",
            run: dgi_case,
        },
        GradCase {
            name: "ggd",
            run: ggd_case,
        },
        GradCase {
            name: "grace",
            run: grace_case,
        },
        GradCase {
            name: "kge total loss",
            run: kge_case,
        },
    ]);
    cases
}
