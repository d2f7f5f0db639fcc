use kgforge::eval::{evaluate, ThresholdMode};
use kgforge::graph::{split_edges, EdgeSplit, KnowledgeGraph, Triple};
use kgforge::kge::{predict_links, KgeConfig, KgeModel, Rgcn, Z_NAME};
use kgforge::numerics::{seeded_rng, OptimConfig};
use kgforge::pipeline::{fit, model_from_params, random_features};
use kgforge::synthetic::{synthetic_graph, SyntheticConfig};
use kgforge::testkit::random_tensor;

fn graph(nodes: usize, triples: usize, seed: u64) -> KnowledgeGraph {
    let syn = SyntheticConfig {
        num_nodes: nodes,
        num_relations: 3,
        num_triples: triples,
        communities: 2,
        dim: 8,
        ..SyntheticConfig::default()
    };
    synthetic_graph(&syn, seed).unwrap().graph
}

fn part(g: &KnowledgeGraph, ids: &[usize]) -> Vec<Triple> {
    ids.iter().map(|&i| g.triples()[i]).collect()
}

fn config(epochs: usize) -> KgeConfig {
    KgeConfig {
        hidden_dim: 32,
        dim: 32,
        walk_length: 6,
        walk_steps: 6,
        optim: OptimConfig {
            learning_rate: 0.02,
            batch_size: 8,
            epochs,
            warmup_steps: 5,
            patience: 10_000,
            dropout: 0.0,
            reg_weight: 0.0,
            ..OptimConfig::default()
        },
        ..KgeConfig::default()
    }
}

#[test]
fn tiny_graph_is_memorized() {
    let g = graph(20, 50, 3);
    let split = split_edges(&g, [0.8, 0.1, 0.1], 3).unwrap();
    let features = random_features(&g, 16, 3);
    let cfg = config(150);
    let (_, state) = fit(&g, &split, &features, &cfg, 3).unwrap();
    let model = model_from_params(&g, &split, &features.source, state.params.extract_prefix(""), &cfg).unwrap();
    let report = evaluate(&model, &g, "train", &part(&g, &split.train), 1, 3, ThresholdMode::default()).unwrap();
    assert!(report.ap >= 0.99, "train AP {}", report.ap);
}

#[test]
fn untrained_model_ranks_at_chance() {
    let g = graph(60, 200, 9);
    let split = split_edges(&g, [0.6, 0.2, 0.2], 9).unwrap();
    let cfg = config(1);
    let total: f64 = (0..20u64)
        .map(|seed| {
            let features = random_features(&g, 16, seed);
            let rgcn = Rgcn::new(g.num_relations(), 16, cfg.hidden_dim, cfg.dim, 0.0);
            let mut params = features.params.clone();
            let mut rng = seeded_rng(seed);
            rgcn.init_params(&mut params, &mut rng);
            params.insert(Z_NAME.to_string(), random_tensor(g.num_relations(), cfg.dim, 1.0, &mut rng));
            let model = KgeModel::new(&g.with_triples(&split.train), rgcn, features.source, params).unwrap();
            evaluate(&model, &g, "test", &part(&g, &split.test), 1, seed, ThresholdMode::default())
                .unwrap()
                .ap
        })
        .sum();
    let mean = total / 20.0;
    assert!((mean - 0.5).abs() <= 0.1, "mean AP {mean}");
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let g = graph(30, 90, 4);
    let split: EdgeSplit = split_edges(&g, [0.6, 0.2, 0.2], 4).unwrap();
    let features = random_features(&g, 8, 4);
    let cfg = config(3);
    let (model, state) = fit(&g, &split, &features, &cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    state.best_params.save(&path, false).unwrap();
    let loaded = kgforge::numerics::ParamStore::load(&path).unwrap();
    let back = model_from_params(&g, &split, &features.source, loaded, &cfg).unwrap();
    let test = part(&g, &split.test);
    let a = predict_links(&model, &test).unwrap();
    let b = predict_links(&back, &test).unwrap();
    assert_eq!(
        a.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
    );
}
