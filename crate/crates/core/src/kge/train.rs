use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use super::rgcn::{RelationAdjacency, Rgcn};
use super::saint::graphsaint_sample;
use super::score::{distmult_logits, kge_loss, Z_NAME};
use super::{FeatureSource, KgeModel};
use crate::error::{Error, Result};
use crate::graph::{sample_negatives, EdgeSplit, KnowledgeGraph, NegativeSampler, Triple};
use crate::numerics::{glorot, optimizer_step, schedule_lr, seeded_rng, sub_seed, OptimConfig, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KgeConfig {
    pub hidden_dim: usize,
    /// Output width of the encoder and of the relation embeddings.
    pub dim: usize,
    /// Negatives per positive.
    pub neg_ratio: usize,
    pub walk_length: usize,
    /// Random-walk batches per epoch.
    pub walk_steps: usize,
    /// α; the regularizer weight is `reg_alpha * optim.reg_weight`.
    pub reg_alpha: f64,
    /// `optim.batch_size` is the number of walk roots per batch.
    pub optim: OptimConfig,
}

impl Default for KgeConfig {
    fn default() -> Self {
        KgeConfig {
            hidden_dim: 128,
            dim: 128,
            neg_ratio: 1,
            walk_length: 10,
            walk_steps: 1000,
            reg_alpha: 1.0,
            optim: OptimConfig::default(),
        }
    }
}

impl KgeConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.neg_ratio == 0 {
            return Err(Error::config("neg_ratio must be >= 1"));
        }
        if self.walk_length == 0 || self.walk_steps == 0 {
            return Err(Error::config("walk_length and walk_steps must be >= 1"));
        }
        if self.hidden_dim == 0 || self.dim == 0 {
            return Err(Error::config("hidden_dim and dim must be >= 1"));
        }
        if self.reg_alpha < 0.0 {
            return Err(Error::config("reg_alpha must be >= 0"));
        }
        let total = self.optim.epochs * self.walk_steps;
        if total <= self.optim.warmup_steps {
            return Err(Error::config(format!(
                "{total} training steps do not exceed warmup_steps = {}",
                self.optim.warmup_steps
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.optim.epochs * self.walk_steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub best: bool,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Current parameters with optimizer moments.
    pub params: ParamStore,
    pub best_params: ParamStore,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid: f64,
    /// 1-based epoch of `best_params`.
    pub best_epoch: usize,
    pub stale: usize,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

const BEST_PREFIX: &str = "best/";
const META: &str = "state/meta";
const LOG: &str = "state/log";

impl TrainState {
    /// Flattens into one store: current parameters (moments kept), `best/…`
    /// copies, and `state/…` bookkeeping tensors.
    pub fn to_checkpoint(&self) -> ParamStore {
        let mut s = self.params.clone();
        for (k, v) in self.best_params.iter() {
            s.insert(format!("{BEST_PREFIX}{k}"), v.clone());
        }
        s.insert(
            META,
            Tensor::row_vector(vec![
                self.epoch as f64,
                self.best_valid,
                self.best_epoch as f64,
                self.stale as f64,
                f64::from(u8::from(self.stopped_early)),
            ]),
        );
        let mut rows = Vec::with_capacity(self.log.len() * 5);
        for e in &self.log {
            rows.extend([e.epoch as f64, e.train_loss, e.valid_loss, e.lr, f64::from(u8::from(e.best))]);
        }
        s.insert(LOG, Tensor::matrix(self.log.len(), 5, rows).unwrap());
        s
    }

    pub fn from_checkpoint(mut store: ParamStore) -> Result<Self> {
        let meta = store
            .remove(META)
            .ok_or_else(|| Error::data("checkpoint has no training state (not a last-epoch checkpoint?)"))?;
        let log_t = store
            .remove(LOG)
            .ok_or_else(|| Error::data("checkpoint has no training log"))?;
        let m = meta.data();
        if m.len() != 5 {
            return Err(Error::data("malformed training state"));
        }
        let best_names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(BEST_PREFIX))
            .map(str::to_string)
            .collect();
        let mut best_params = ParamStore::new();
        for name in best_names {
            let v = store.remove(&name).unwrap();
            best_params.insert(&name[BEST_PREFIX.len()..], v);
        }
        let log = (0..log_t.rows())
            .map(|r| {
                let row = log_t.row(r);
                EpochLog {
                    epoch: row[0] as usize,
                    train_loss: row[1],
                    valid_loss: row[2],
                    lr: row[3],
                    best: row[4] != 0.0,
                }
            })
            .collect();
        Ok(TrainState {
            params: store,
            best_params,
            epoch: m[0] as usize,
            best_valid: m[1],
            best_epoch: m[2] as usize,
            stale: m[3] as usize,
            log,
            stopped_early: m[4] != 0.0,
        })
    }
}

/// `epoch,train_loss,valid_loss,lr,best_flag` CSV.
pub fn write_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,valid_loss,lr,best_flag\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.valid_loss,
            e.lr,
            u8::from(e.best)
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn part_triples(graph: &KnowledgeGraph, idx: &[usize]) -> Vec<Triple> {
    idx.iter().map(|&i| graph.triples()[i]).collect()
}

/// Adds the encoder and relation embeddings to `store` (seeded from `seed`).
pub(crate) fn init_model_params(rgcn: &Rgcn, store: &mut ParamStore, seed: u64) {
    let mut rng = seeded_rng(sub_seed(seed, "kge/init", 0));
    rgcn.init_params(store, &mut rng);
    store.insert(Z_NAME, glorot(rgcn.num_relations, rgcn.out_dim(), &mut rng));
}

/// Trains the link predictor on the training part of `split`.
///
/// `init` carries the feature parameters (fusion weights, or a learnable
/// table); encoder weights are created here unless `resume` is given.
/// Negatives are filtered against every triple of `graph`. `on_epoch` sees
/// the state after each epoch, e.g. to checkpoint it, and may break to end
/// the run early (it can be resumed from that state).
pub fn train_kge(
    graph: &KnowledgeGraph,
    split: &EdgeSplit,
    features: &FeatureSource,
    init: ParamStore,
    cfg: &KgeConfig,
    seed: u64,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<ControlFlow<()>>,
) -> Result<TrainState> {
    cfg.validate()?;
    if split.valid.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    if split.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let train_graph = graph.with_triples(&split.train);
    let rgcn = Rgcn::new(graph.num_relations(), features.dim(), cfg.hidden_dim, cfg.dim, cfg.optim.dropout);
    let valid_pos = part_triples(graph, &split.valid);
    let valid_neg = sample_negatives(&valid_pos, graph, cfg.neg_ratio, sub_seed(seed, "kge/valid-neg", 0))?;
    let lambda = cfg.optim.reg_weight;
    let total_steps = cfg.total_steps();

    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut params = init;
            init_model_params(&rgcn, &mut params, seed);
            TrainState {
                best_params: params.extract_prefix(""),
                params,
                epoch: 0,
                best_valid: f64::INFINITY,
                best_epoch: 0,
                stale: 0,
                log: Vec::new(),
                stopped_early: false,
            }
        }
    };

    while state.epoch < cfg.optim.epochs && !state.stopped_early {
        let epoch = state.epoch;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for b in 0..cfg.walk_steps {
            let key = (epoch * cfg.walk_steps + b) as u64;
            let batch = graphsaint_sample(
                &train_graph,
                cfg.optim.batch_size,
                cfg.walk_length,
                sub_seed(seed, "kge/saint", key),
            )?;
            if batch.triples.is_empty() {
                continue;
            }
            let mut rng = seeded_rng(sub_seed(seed, "kge/batch", key));
            let sampler = NegativeSampler::restricted(graph, &batch.nodes);
            let negatives = sampler.sample(&batch.triples, cfg.neg_ratio, &mut rng)?;

            // Negative endpoints outside the walk join as message-less rows.
            let mut nodes = batch.nodes.clone();
            let mut local = batch.local_index(graph.num_nodes());
            for t in &negatives {
                for n in [t.head, t.tail] {
                    if local[n] == usize::MAX {
                        local[n] = nodes.len();
                        nodes.push(n);
                    }
                }
            }
            let to_local = |ts: &[Triple]| -> Vec<Triple> {
                ts.iter()
                    .map(|t| Triple::new(local[t.head], t.relation, local[t.tail]))
                    .collect()
            };
            let pos = to_local(&batch.triples);
            let neg = to_local(&negatives);
            let adj = RelationAdjacency::new(nodes.len(), graph.num_relations(), &pos)?;

            let mut tape = Tape::new();
            let x0 = features.forward(&mut tape, &state.params, &nodes)?;
            let x = rgcn.forward(&mut tape, &state.params, &adj, x0, true, &mut rng)?;
            let z = tape.param(&state.params, Z_NAME)?;
            let pl = distmult_logits(&mut tape, x, z, &pos)?;
            let nl = distmult_logits(&mut tape, x, z, &neg)?;
            let loss = kge_loss(&mut tape, pl, nl, x, z, lambda, cfg.reg_alpha)?;
            loss_sum += tape.value(loss).item()?;
            batches += 1;
            let grads = tape.backward(loss)?;
            state.params.zero_grad();
            grads.accumulate_into(&tape, &mut state.params)?;
            optimizer_step(&mut state.params, &cfg.optim, total_steps)?;
        }
        if batches == 0 {
            return Err(Error::SamplingExhausted(
                "no random-walk batch of this epoch contained a training triple".into(),
            ));
        }

        let model = KgeModel::new(&train_graph, rgcn.clone(), features.clone(), state.params.extract_prefix(""))?;
        let valid_loss = validation_loss(&model, &valid_pos, &valid_neg)?;
        state.epoch += 1;
        let improved = valid_loss < state.best_valid;
        if improved {
            state.best_valid = valid_loss;
            state.best_epoch = state.epoch;
            state.best_params = state.params.extract_prefix("");
            state.stale = 0;
        } else {
            state.stale += 1;
        }
        let lr = schedule_lr(state.params.step() as usize, &cfg.optim, total_steps)?;
        state.log.push(EpochLog {
            epoch: state.epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss,
            lr,
            best: improved,
        });
        log::info!(
            "epoch {}: train {:.5} valid {:.5}{}",
            state.epoch,
            loss_sum / batches as f64,
            valid_loss,
            if improved { " *" } else { "" }
        );
        if state.stale >= cfg.optim.patience {
            state.stopped_early = true;
        }
        if on_epoch(&state)?.is_break() {
            break;
        }
    }
    Ok(state)
}

/// Mean BCE of the model's scores on fixed validation positives and
/// negatives.
fn validation_loss(model: &KgeModel, pos: &[Triple], neg: &[Triple]) -> Result<f64> {
    let x = model.embeddings()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let z = tape.constant(model.relation_embeddings()?.clone())?;
    let pl = distmult_logits(&mut tape, xv, z, pos)?;
    let nl = distmult_logits(&mut tape, xv, z, neg)?;
    let loss = kge_loss(&mut tape, pl, nl, xv, z, 0.0, 0.0)?;
    tape.value(loss).item()
}
