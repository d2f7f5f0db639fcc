use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde_json::json;

use kgforge::eval::evaluate;
use kgforge::gcl::{pretrain, write_curve, GclMethod};
use kgforge::graph::{load_graph, read_split, split_edges, write_split, EdgeSplit, KnowledgeGraph, Triple};
use kgforge::kge::{train_kge, write_log, FeatureSource, KgeModel, TrainState};
use kgforge::modality::{load_table, mock_provider, read_tsv, write_tsv, EmbeddingTable, Modality, ModalityStore};
use kgforge::numerics::ParamStore;
use kgforge::pipeline::{feature_matrix_from_tables, fused_tables, init_fusion, model_from_params};
use kgforge::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::Manifest;

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn pretrain_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("pretrain")
}

fn z_table_path(cfg: &RunConfig, slug: &str) -> PathBuf {
    pretrain_dir(cfg).join(format!("z_{slug}.tsv"))
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("model.ckpt")
}

fn last_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("last.ckpt")
}

fn graph(cfg: &RunConfig, m: &mut Manifest) -> Result<KnowledgeGraph> {
    let g = load_graph(&cfg.nodes, &cfg.triples)?;
    m.input(&cfg.nodes);
    m.input(&cfg.triples);
    log::info!(
        "graph: {} nodes, {} relations, {} triples",
        g.num_nodes(),
        g.num_relations(),
        g.num_triples()
    );
    Ok(g)
}

fn split(cfg: &RunConfig, g: &KnowledgeGraph, m: &mut Manifest) -> Result<EdgeSplit> {
    let s = read_split(&cfg.split_file, g.num_triples())?;
    m.input(&cfg.split_file);
    Ok(s)
}

fn modalities(cfg: &RunConfig, g: &KnowledgeGraph, m: &mut Manifest) -> Result<ModalityStore> {
    let mut store = ModalityStore::new(cfg.modality_dim, cfg.seed, cfg.features.structural);
    if cfg.mock_embeddings {
        for t in mock_provider(g, cfg.seed, cfg.modality_dim) {
            store.add_table(t)?;
        }
    }
    for (modality, path) in &cfg.embeddings {
        let mut t = load_table(path, modality)?;
        t.attach(g);
        store.add_table(t)?;
        m.input(path);
    }
    let all: Vec<usize> = (0..g.num_nodes()).collect();
    for (modality, count) in store.provenance_counts(&all) {
        log::info!("{modality}: {} loaded, {} random-init", count.loaded, count.random_init);
    }
    Ok(store)
}

/// The link predictor's input features and the parameters it starts from.
fn features(cfg: &RunConfig, g: &KnowledgeGraph, m: &mut Manifest) -> Result<(FeatureSource, ParamStore)> {
    if cfg.use_z_tables {
        let mut tables = Vec::new();
        for ty in g.node_types() {
            let path = z_table_path(cfg, &ty.slug());
            let t = read_tsv(&path)?;
            if t.modality() != &Modality::gcl(ty) {
                return Err(Error::load(&path, 1, format!("expected modality `{}`", Modality::gcl(ty))));
            }
            m.input(&path);
            tables.push(t);
        }
        let source = FeatureSource::Table(feature_matrix_from_tables(g, &tables, cfg.seed)?);
        let mut params = ParamStore::new();
        if !cfg.features.freeze {
            source.make_learnable(&mut params);
        }
        Ok((source, params))
    } else {
        let store = modalities(cfg, g, m)?;
        let (bank, params) = init_fusion(g, &store, &cfg.features, cfg.seed)?;
        Ok((FeatureSource::Fused(bank), params))
    }
}

fn model(cfg: &RunConfig, g: &KnowledgeGraph, s: &EdgeSplit, m: &mut Manifest) -> Result<KgeModel> {
    let (source, _) = features(cfg, g, m)?;
    let path = model_path(cfg);
    let params = ParamStore::load(&path)?;
    m.input(&path);
    model_from_params(g, s, &source, params, &cfg.kge)
}

pub fn cmd_split(cfg: &RunConfig) -> Result<PathBuf> {
    let mut m = Manifest::start("split");
    let g = graph(cfg, &mut m)?;
    let s = split_edges(&g, cfg.split_ratios, cfg.seed)?;
    if let Some(dir) = cfg.split_file.parent() {
        create_dir(dir)?;
    }
    create_dir(&cfg.out)?;
    write_split(&s, &cfg.split_file)?;
    log::info!("split: {} / {} / {}", s.train.len(), s.valid.len(), s.test.len());
    m.output(&cfg.split_file);
    m.note("sizes", json!([s.train.len(), s.valid.len(), s.test.len()]));
    m.finish(cfg)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let mut m = Manifest::start("pretrain");
    let g = graph(cfg, &mut m)?;
    let s = split(cfg, &g, &mut m)?;
    let store = modalities(cfg, &g, &mut m)?;
    let (bank, fusion_params) = init_fusion(&g, &store, &cfg.features, cfg.seed)?;
    let dir = pretrain_dir(cfg);
    create_dir(&dir)?;

    let (tables, params) = if cfg.features.gcl.method == GclMethod::None {
        log::info!("gcl = none: exporting fused vectors as z");
        (fused_tables(&g, &bank, &fusion_params)?, fusion_params)
    } else {
        let train_graph = g.with_triples(&s.train);
        let threads = cfg.effective_threads()?;
        let out = pretrain(&train_graph, &bank, &fusion_params, &cfg.features.gcl, cfg.seed, threads)?;
        for t in &out.types {
            let path = dir.join(format!("curve_{}.csv", t.node_type.slug()));
            write_curve(&t.curve, &path)?;
            m.output(&path);
            if t.identity_fallback {
                m.note(&format!("identity_fallback/{}", t.node_type.slug()), json!(true));
            }
        }
        (out.z_tables()?, out.params)
    };
    for t in &tables {
        let slug = t.modality().tag().trim_start_matches("gcl:").to_string();
        let ty = g
            .node_types()
            .find(|ty| ty.as_str() == slug)
            .ok_or_else(|| Error::contract(format!("z table for unknown type `{slug}`")))?;
        let path = z_table_path(cfg, &ty.slug());
        write_tsv(t, &path)?;
        m.output(path);
    }
    let ckpt = dir.join("encoder.ckpt");
    params.save(&ckpt, false)?;
    m.output(ckpt);
    m.finish(cfg)
}

/// `stop_after` ends this invocation after that many epochs in total;
/// `--resume` continues from the saved state.
pub fn cmd_train(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> Result<PathBuf> {
    let mut m = Manifest::start("train");
    let g = graph(cfg, &mut m)?;
    let s = split(cfg, &g, &mut m)?;
    let (source, init) = features(cfg, &g, &mut m)?;
    create_dir(&cfg.out)?;
    let last = last_path(cfg);
    let state = if resume {
        let st = TrainState::from_checkpoint(ParamStore::load(&last)?)?;
        log::info!("resuming after epoch {}", st.epoch);
        m.input(&last);
        m.note("resumed_from_epoch", json!(st.epoch));
        Some(st)
    } else {
        None
    };
    let final_state = train_kge(&g, &s, &source, init, &cfg.kge, cfg.seed, state, &mut |st| {
        st.to_checkpoint().save(&last, true)?;
        Ok(match stop_after {
            Some(n) if st.epoch >= n => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        })
    })?;
    let model = model_path(cfg);
    final_state.best_params.save(&model, false)?;
    let log_path = cfg.out.join("train_log.csv");
    write_log(&final_state.log, &log_path)?;
    m.output(&model);
    m.output(&log_path);
    m.output(&last);
    m.note("best_epoch", json!(final_state.best_epoch));
    m.note("best_valid_loss", json!(final_state.best_valid));
    m.note("epochs_run", json!(final_state.epoch));
    m.note("stopped_early", json!(final_state.stopped_early));
    m.finish(cfg)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let mut m = Manifest::start("eval");
    let g = graph(cfg, &mut m)?;
    let s = split(cfg, &g, &mut m)?;
    let model = model(cfg, &g, &s, &mut m)?;
    let part = cfg.eval_part;
    let positives: Vec<Triple> = s.part(part).iter().map(|&i| g.triples()[i]).collect();
    let dir = cfg.out.join("eval");
    create_dir(&dir)?;
    for &ratio in &cfg.eval_ratios {
        let report = evaluate(&model, &g, part.as_str(), &positives, ratio, cfg.seed, cfg.threshold)?;
        log::info!(
            "{} 1:{ratio}: AP {:.4} F1 {:.4}",
            part.as_str(),
            report.ap,
            report.f1
        );
        let txt = dir.join(format!("report_{}_r{ratio}.txt", part.as_str()));
        let csv = dir.join(format!("per_relation_{}_r{ratio}.csv", part.as_str()));
        report.write(&txt, &csv)?;
        m.output(txt);
        m.output(csv);
    }
    m.finish(cfg)
}

pub fn cmd_export(cfg: &RunConfig) -> Result<PathBuf> {
    let mut m = Manifest::start("export");
    let g = graph(cfg, &mut m)?;
    let s = split(cfg, &g, &mut m)?;
    let model = model(cfg, &g, &s, &mut m)?;
    let nodes: Vec<usize> = match &cfg.export_nodes {
        Some(ids) => {
            let bad: Vec<String> = ids
                .iter()
                .filter(|&&n| n >= g.num_nodes())
                .map(usize::to_string)
                .collect();
            if !bad.is_empty() {
                return Err(Error::data(format!(
                    "unknown node ids: {} (graph has {} nodes)",
                    bad.join(", "),
                    g.num_nodes()
                )));
            }
            let mut seen = std::collections::HashSet::new();
            if let Some(d) = ids.iter().find(|&&n| !seen.insert(n)) {
                return Err(Error::config(format!("`export_nodes` lists node {d} twice")));
            }
            ids.clone()
        }
        None => (0..g.num_nodes()).collect(),
    };
    let x = model.embeddings()?.select_rows(&nodes);
    let table = EmbeddingTable::from_matrix(Modality::Custom("kge".into()), &nodes, &x)?;
    let dir = cfg.out.join("export");
    create_dir(&dir)?;
    let path = dir.join("embeddings.tsv");
    write_tsv(&table, &path)?;
    m.output(&path);
    m.note("rows", json!(nodes.len()));
    m.finish(cfg)
}
