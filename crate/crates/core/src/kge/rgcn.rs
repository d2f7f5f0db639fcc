use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::numerics::{dropout, glorot, ParamStore, Rng64, SparseMatrix, Tape, Tensor, Var};

/// Per-relation mean-aggregation matrices: row `v`, column `u` holds
/// `1/|N_r(v)|` for every edge `u -r-> v`. `None` for relations without
/// edges in this graph.
#[derive(Clone, Debug)]
pub struct RelationAdjacency {
    pub num_nodes: usize,
    pub per_relation: Vec<Option<Arc<SparseMatrix>>>,
}

impl RelationAdjacency {
    /// `triples` use local node ids in `0..num_nodes`.
    pub fn new(num_nodes: usize, num_relations: usize, triples: &[Triple]) -> Result<Self> {
        let mut in_lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_relations];
        for t in triples {
            if t.relation >= num_relations {
                return Err(Error::contract(format!(
                    "relation {} absent from the model ({num_relations} relations)",
                    t.relation
                )));
            }
            if t.head >= num_nodes || t.tail >= num_nodes {
                return Err(Error::contract("adjacency triple outside the node range"));
            }
            in_lists[t.relation].push((t.tail, t.head));
        }
        let per_relation = in_lists
            .into_iter()
            .map(|edges| {
                if edges.is_empty() {
                    return None;
                }
                let mut count = vec![0usize; num_nodes];
                for &(v, _) in &edges {
                    count[v] += 1;
                }
                let entries = edges
                    .into_iter()
                    .map(|(v, u)| (v, u, 1.0 / count[v] as f64))
                    .collect();
                Some(Arc::new(SparseMatrix::from_triplets(num_nodes, num_nodes, entries)))
            })
            .collect();
        Ok(RelationAdjacency {
            num_nodes,
            per_relation,
        })
    }
}

/// Relational GCN: `h' = ReLU(h W0 + Σ_r A_r h W_r + b)` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgcn {
    pub num_relations: usize,
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub dropout: f64,
}

impl Rgcn {
    pub fn new(num_relations: usize, in_dim: usize, hidden_dim: usize, out_dim: usize, dropout: f64) -> Self {
        Rgcn {
            num_relations,
            dims: vec![in_dim, hidden_dim, out_dim],
            dropout,
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn rel_name(layer: usize, r: usize) -> String {
        format!("rgcn/layer{layer}/rel{r}")
    }

    pub fn self_name(layer: usize) -> String {
        format!("rgcn/layer{layer}/self")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("rgcn/layer{layer}/bias")
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng64) {
        for l in 0..self.layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            store.insert(Self::self_name(l), glorot(i, o, rng));
            for r in 0..self.num_relations {
                store.insert(Self::rel_name(l, r), glorot(i, o, rng));
            }
            store.insert(Self::bias_name(l), Tensor::zeros(1, o));
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        adj: &RelationAdjacency,
        x: Var,
        train: bool,
        rng: &mut Rng64,
    ) -> Result<Var> {
        if adj.per_relation.len() != self.num_relations {
            return Err(Error::contract(format!(
                "adjacency has {} relations, model has {}",
                adj.per_relation.len(),
                self.num_relations
            )));
        }
        let mut h = x;
        for l in 0..self.layers() {
            if l > 0 {
                h = dropout(tape, h, self.dropout, train, rng)?;
            }
            let w0 = tape.param(store, &Self::self_name(l))?;
            let mut acc = tape.matmul(h, w0)?;
            for (r, a) in adj.per_relation.iter().enumerate() {
                let Some(a) = a else { continue };
                let w = tape.param(store, &Self::rel_name(l, r))?;
                let hw = tape.matmul(h, w)?;
                let msg = tape.spmm(a, hw)?;
                acc = tape.add(acc, msg)?;
            }
            let b = tape.param(store, &Self::bias_name(l))?;
            let pre = tape.add(acc, b)?;
            h = tape.relu(pre)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use crate::testkit::{check_params, random_tensor};

    fn model_and_store(seed: u64) -> (Rgcn, ParamStore) {
        let m = Rgcn::new(2, 3, 4, 3, 0.2);
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(seed);
        m.init_params(&mut s, &mut rng);
        for l in 0..2 {
            let o = m.dims[l + 1];
            s.insert(Rgcn::bias_name(l), random_tensor(1, o, 0.5, &mut rng));
        }
        (m, s)
    }

    fn triples() -> Vec<Triple> {
        vec![
            Triple::new(0, 0, 1),
            Triple::new(2, 0, 1),
            Triple::new(1, 1, 3),
            Triple::new(3, 1, 4),
            Triple::new(5, 0, 4),
        ]
    }

    #[test]
    fn mean_normalizer_per_relation() {
        let a = RelationAdjacency::new(6, 2, &triples()).unwrap();
        let d = a.per_relation[0].as_ref().unwrap().to_dense();
        assert_eq!(d[6], 0.5);
        assert_eq!(d[6 + 2], 0.5);
        assert_eq!(d[4 * 6 + 5], 1.0);
        assert!(RelationAdjacency::new(6, 1, &triples()).is_err());
    }

    #[test]
    fn node_without_in_edges_sees_only_itself() {
        let (m, s) = model_and_store(1);
        let m1 = Rgcn {
            dims: vec![3, 4],
            ..m.clone()
        };
        let adj = RelationAdjacency::new(6, 2, &triples()).unwrap();
        let x = random_tensor(6, 3, 1.0, &mut seeded_rng(2));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let h = m1.forward(&mut tape, &s, &adj, xv, false, &mut seeded_rng(0)).unwrap();
        // node 0 has no in-edges
        let w0 = s.get(&Rgcn::self_name(0)).unwrap();
        let b = s.get(&Rgcn::bias_name(0)).unwrap();
        let expect = Tensor::row_vector(x.row(0).to_vec()).matmul(w0).unwrap();
        for c in 0..4 {
            let v = (expect.get(0, c) + b.get(0, c)).max(0.0);
            assert!((tape.value(h).get(0, c) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_output_without_bias() {
        let m = Rgcn::new(2, 3, 4, 3, 0.0);
        let mut s = ParamStore::new();
        m.init_params(&mut s, &mut seeded_rng(0));
        let adj = RelationAdjacency::new(6, 2, &triples()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(6, 3)).unwrap();
        let h = m.forward(&mut tape, &s, &adj, x, true, &mut seeded_rng(0)).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, s) = model_and_store(3);
        let adj = RelationAdjacency::new(6, 2, &triples()).unwrap();
        let x = random_tensor(6, 3, 1.0, &mut seeded_rng(4));
        let report = check_params(
            &s,
            |tape, st| {
                let xv = tape.constant(x.clone())?;
                let h = m.forward(tape, st, &adj, xv, false, &mut seeded_rng(0))?;
                let sq = tape.mul(h, h)?;
                tape.sum(sq)
            },
            None,
            &mut seeded_rng(5),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
