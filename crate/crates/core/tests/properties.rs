use std::collections::HashSet;

use proptest::prelude::*;

use kgforge::eval::{average_precision, f1_score, per_relation_precision, EvalReport, RelationRow, ScoredEdge};
use kgforge::fusion::{fuse_mean, FusionMethod, FusionModel};
use kgforge::gcl::{augment, info_nce};
use kgforge::graph::{
    homogeneous_subgraph, load_graph, sample_negatives, split_edges, write_nodes, write_triples, KnowledgeGraph,
    NodeType, Triple,
};
use kgforge::kge::{distmult_score, graphsaint_sample};
use kgforge::modality::{keyed_fill, Modality, ModalityView, Provenance};
use kgforge::numerics::{dropout_mask, seeded_rng, Tape, Tensor};
use kgforge::synthetic::{synthetic_graph, SyntheticConfig};
use kgforge::testkit::random_tensor;

fn small_graph(seed: u64) -> KnowledgeGraph {
    let syn = SyntheticConfig {
        num_nodes: 30,
        num_relations: 3,
        num_triples: 60,
        communities: 2,
        dim: 4,
        ..SyntheticConfig::default()
    };
    synthetic_graph(&syn, seed).unwrap().graph
}

fn scored_list() -> impl Strategy<Value = Vec<ScoredEdge>> {
    prop::collection::vec((0.0f64..1.0, any::<bool>(), 0usize..3), 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (s, l, r))| ScoredEdge::new(Triple::new(i, r, i + 1), s, l))
            .collect()
    })
}

fn view(vectors: Vec<Vec<f64>>) -> ModalityView {
    ModalityView {
        node: 0,
        vectors: vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| (Modality::Custom(format!("m{i}")), v, Provenance::Loaded))
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_strictly_positive_distributions(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = random_tensor(4, 5, scale, &mut seeded_rng(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let s = tape.softmax_rows(v).unwrap();
        for r in 0..4 {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn inverted_dropout_scales_survivors(seed in any::<u64>(), rate in 0.0f64..0.9) {
        let mask = dropout_mask(200, rate, &mut seeded_rng(seed));
        for m in mask {
            prop_assert!(m == 0.0 || (m - 1.0 / (1.0 - rate)).abs() <= 1e-12);
        }
        let x = random_tensor(3, 4, 1.0, &mut seeded_rng(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let y = kgforge::numerics::dropout(&mut tape, v, rate, false, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn split_partitions_every_triple(seed in any::<u64>(), a in 0.2f64..0.8) {
        let g = small_graph(seed % 50);
        let rest = 1.0 - a;
        let s = split_edges(&g, [a, rest / 2.0, rest / 2.0], seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..g.num_triples()).collect::<Vec<_>>());
        let want = a * g.num_triples() as f64;
        prop_assert!((s.train.len() as f64 - want).abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn homogeneous_subgraph_matches_brute_force(seed in 0u64..50) {
        let g = small_graph(seed);
        for ty in g.node_types() {
            let sub = homogeneous_subgraph(&g, ty);
            let got: HashSet<(usize, usize, usize)> = sub
                .graph
                .triples()
                .iter()
                .map(|t| (sub.parent_ids[t.head], t.relation, sub.parent_ids[t.tail]))
                .collect();
            let brute: HashSet<(usize, usize, usize)> = g
                .triples()
                .iter()
                .filter(|t| g.node_type(t.head) == ty && g.node_type(t.tail) == ty)
                .map(|t| (t.head, t.relation, t.tail))
                .collect();
            prop_assert_eq!(got, brute);
            let distinct: HashSet<usize> = sub.parent_ids.iter().copied().collect();
            prop_assert_eq!(distinct.len(), sub.parent_ids.len());
        }
    }

    #[test]
    fn negatives_are_typed_filtered_and_counted(seed in any::<u64>(), ratio in 1usize..4) {
        let g = small_graph(seed % 50);
        let pos: Vec<Triple> = g.triples()[..10].to_vec();
        let neg = sample_negatives(&pos, &g, ratio, seed).unwrap();
        prop_assert_eq!(neg.len(), ratio * pos.len());
        for t in &neg {
            prop_assert!(!g.contains(t));
            let sig = g.signature(t.relation);
            prop_assert!(sig.head_types.contains(g.node_type(t.head)));
            prop_assert!(sig.tail_types.contains(g.node_type(t.tail)));
        }
    }

    #[test]
    fn graph_files_round_trip(seed in 0u64..50) {
        let g = small_graph(seed);
        let dir = tempfile::tempdir().unwrap();
        let (n, t) = (dir.path().join("n.tsv"), dir.path().join("t.tsv"));
        write_nodes(&g, &n).unwrap();
        write_triples(&g, &t).unwrap();
        let back = load_graph(&n, &t).unwrap();
        prop_assert_eq!(back.nodes(), g.nodes());
        // relation ids may be renumbered, names must survive
        let named = |k: &KnowledgeGraph| {
            let mut v: Vec<(usize, String, usize)> = k
                .triples()
                .iter()
                .map(|t| (t.head, k.relation_name(t.relation).to_string(), t.tail))
                .collect();
            v.sort();
            v
        };
        prop_assert_eq!(named(&back), named(&g));
    }

    #[test]
    fn keyed_fill_is_pure(seed in any::<u64>(), node in 0usize..10_000, dim in 1usize..32) {
        let a = keyed_fill(seed, node, &Modality::Description, dim);
        prop_assert_eq!(&a, &keyed_fill(seed, node, &Modality::Description, dim));
        prop_assert_eq!(a.len(), dim);
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mean_fusion_ignores_modality_order(seed in any::<u64>(), m in 1usize..5) {
        let mut rng = seeded_rng(seed);
        let vs: Vec<Vec<f64>> = (0..m).map(|_| random_tensor(1, 4, 1.0, &mut rng).into_data()).collect();
        let mut rev = vs.clone();
        rev.reverse();
        let a = fuse_mean(&view(vs)).unwrap();
        let b = fuse_mean(&view(rev)).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_permutes_weights_with_modalities(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let model = FusionModel::new(FusionMethod::Attention, NodeType::Drug, 3, 4, 5, false).unwrap();
        let mut store = kgforge::numerics::ParamStore::new();
        model.init_params(&mut store, &mut rng, None).unwrap();
        let vs: Vec<Vec<f64>> = (0..3).map(|_| random_tensor(1, 4, 1.0, &mut rng).into_data()).collect();
        let a = model.fuse_view(&view(vs.clone()), &store, None).unwrap();
        // modality order (2, 0, 1) with the projections moved along
        let mut swapped = store.clone();
        for (to, from) in [(0, 2), (1, 0), (2, 1)] {
            let w = store.get(&format!("fusion/drug/W{from}")).unwrap().clone();
            swapped.insert(format!("fusion/drug/W{to}"), w);
        }
        let b = model
            .fuse_view(&view(vec![vs[2].clone(), vs[0].clone(), vs[1].clone()]), &swapped, None)
            .unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let perm = [a.weights[2], a.weights[0], a.weights[1]];
        for (x, y) in perm.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!(a.weights.iter().all(|&w| w > 0.0 && w < 1.0));
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn grace_is_rotation_invariant_and_nonnegative(seed in any::<u64>(), angle in 0.0f64..6.28) {
        let mut rng = seeded_rng(seed);
        let norm = |t: Tensor| {
            let mut t = t;
            for r in 0..t.rows() {
                let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                t.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
            t
        };
        let p1 = norm(random_tensor(5, 2, 1.0, &mut rng));
        let p2 = norm(random_tensor(5, 2, 1.0, &mut rng));
        let rot = Tensor::matrix(2, 2, vec![angle.cos(), -angle.sin(), angle.sin(), angle.cos()]).unwrap();
        let loss = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap());
            let l = info_nce(&mut tape, x, y, 0.5, false).unwrap();
            tape.value(l).item().unwrap()
        };
        let base = loss(&p1, &p2);
        let turned = loss(&p1.matmul(&rot).unwrap(), &p2.matmul(&rot).unwrap());
        prop_assert!(base >= 0.0);
        prop_assert!((base - turned).abs() <= 1e-10);
    }

    #[test]
    fn augment_is_reproducible_and_records_its_draws(seed in any::<u64>(), p in 0.05f64..0.9) {
        let edges: Vec<(usize, usize)> = (0..12).map(|i| (i, (i + 1) % 12)).collect();
        let x = random_tensor(12, 3, 1.0, &mut seeded_rng(seed));
        let a = augment(&edges, &x, p, p, seed).unwrap();
        let b = augment(&edges, &x, p, p, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.edges.iter().all(|e| edges.contains(e)));
        for r in 0..12 {
            let zero = a.features.row(r).iter().all(|&v| v == 0.0);
            prop_assert_eq!(zero, a.masked.contains(&r));
        }
    }

    #[test]
    fn distmult_is_symmetric(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let [h, r, t] = [0, 1, 2].map(|_| random_tensor(1, 7, 2.0, &mut rng).into_data());
        let (a, b) = (distmult_score(&h, &r, &t), distmult_score(&t, &r, &h));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn graphsaint_batches_are_induced(seed in any::<u64>(), roots in 1usize..10, len in 1usize..6) {
        let g = small_graph(seed % 50);
        let b = graphsaint_sample(&g, roots, len, seed).unwrap();
        let nodes: HashSet<usize> = b.nodes.iter().copied().collect();
        prop_assert!(b.roots.iter().all(|r| nodes.contains(r)));
        let induced: Vec<Triple> = g
            .triples()
            .iter()
            .filter(|t| nodes.contains(&t.head) && nodes.contains(&t.tail))
            .copied()
            .collect();
        prop_assert_eq!(&b.triples, &induced);
    }

    #[test]
    fn ap_survives_monotone_transforms(scored in scored_list()) {
        prop_assume!(scored.iter().any(|e| e.label));
        let base = average_precision(&scored).unwrap();
        for f in [|s: f64| s.powi(3), |s: f64| (5.0 * s).exp() - 2.0, |s: f64| 1.0 / (1.0 + (-s).exp())] {
            let moved: Vec<ScoredEdge> = scored
                .iter()
                .map(|e| ScoredEdge::new(e.triple, f(e.score), e.label))
                .collect();
            prop_assert!((average_precision(&moved).unwrap() - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_the_unit_interval(scored in scored_list(), t in 0.0f64..1.0) {
        prop_assume!(scored.iter().any(|e| e.label));
        let ap = average_precision(&scored).unwrap();
        let f1 = f1_score(&scored, t);
        prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&f1));
        for p in per_relation_precision(&scored, t).0 {
            prop_assert!((0.0..=1.0).contains(&p.precision));
        }
    }

    #[test]
    fn ap_is_one_exactly_when_positives_lead(scored in scored_list()) {
        prop_assume!(scored.iter().any(|e| e.label));
        let ap = average_precision(&scored).unwrap();
        let min_pos = scored.iter().filter(|e| e.label).map(|e| e.score).fold(f64::INFINITY, f64::min);
        let max_neg = scored.iter().filter(|e| !e.label).map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(ap == 1.0, min_pos > max_neg);
    }

    #[test]
    fn reports_round_trip(ap in 0.0f64..1.0, f1 in 0.0f64..1.0, seed in any::<u64>(), n in 1usize..50, tuned in any::<bool>()) {
        let report = EvalReport {
            part: "test".into(),
            ap,
            f1,
            precision: ap / 3.0,
            recall: f1.sqrt(),
            threshold: 0.5,
            tuned,
            positives: n,
            negatives: 3 * n,
            ratio: 3,
            seed,
            relations: vec![RelationRow { name: "drug = target".into(), precision: f1, n_pos: n }],
            omitted: vec!["rare".into()],
        };
        prop_assert_eq!(EvalReport::parse(&report.to_text()).unwrap(), report);
    }
}
