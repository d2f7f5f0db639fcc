//! Link-prediction metrics and the evaluation protocol.

mod metrics;
mod report;

pub use metrics::{
    average_precision, f1_score, per_relation_precision, rank_order, tuned_threshold, Confusion, RelationPrecision,
    ScoredEdge,
};
pub use report::{EvalReport, RelationRow, ThresholdMode};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{sample_negatives, KnowledgeGraph, Triple};
use crate::kge::KgeModel;
use crate::numerics::{seeded_rng, sub_seed};

/// Scores `positives` plus `ratio` filtered negatives each and builds the
/// report. Negatives depend only on `(positives, graph, ratio, seed)`.
pub fn evaluate(
    model: &KgeModel,
    graph: &KnowledgeGraph,
    part: &str,
    positives: &[Triple],
    ratio: usize,
    seed: u64,
    mode: ThresholdMode,
) -> Result<EvalReport> {
    if positives.is_empty() {
        return Err(Error::config(format!("split part `{part}` is empty")));
    }
    let negatives = sample_negatives(positives, graph, ratio, sub_seed(seed, "eval/neg", ratio as u64))?;
    let mut labelled: Vec<(Triple, bool)> = positives.iter().map(|&t| (t, true)).collect();
    labelled.extend(negatives.iter().map(|&t| (t, false)));
    // Tied scores rank in input order; shuffling keeps that from favouring
    // either label.
    labelled.shuffle(&mut seeded_rng(sub_seed(seed, "eval/order", ratio as u64)));
    let triples: Vec<Triple> = labelled.iter().map(|p| p.0).collect();
    let scores = model.predict(&triples)?;
    let scored: Vec<ScoredEdge> = labelled
        .iter()
        .zip(&scores)
        .map(|(&(t, label), &s)| ScoredEdge::new(t, s, label))
        .collect();
    report_from_scores(&scored, graph, part, ratio, seed, mode)
}

pub fn report_from_scores(
    scored: &[ScoredEdge],
    graph: &KnowledgeGraph,
    part: &str,
    ratio: usize,
    seed: u64,
    mode: ThresholdMode,
) -> Result<EvalReport> {
    let ap = average_precision(scored)?;
    let (threshold, tuned) = match mode {
        ThresholdMode::Fixed(t) => {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config(format!("threshold {t} outside (0, 1)")));
            }
            (t, false)
        }
        ThresholdMode::Tuned => (tuned_threshold(scored).map_or(0.5, |(t, _)| t), true),
    };
    let c = Confusion::at(scored, threshold);
    let (present, absent) = per_relation_precision(scored, threshold);
    for &r in &absent {
        log::warn!("relation {} has no predicted positives; omitted from the per-relation table", graph.relation_name(r));
    }
    let positives = scored.iter().filter(|e| e.label).count();
    Ok(EvalReport {
        part: part.to_string(),
        ap,
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        threshold,
        tuned,
        positives,
        negatives: scored.len() - positives,
        ratio,
        seed,
        relations: present
            .into_iter()
            .map(|p| RelationRow {
                name: graph.relation_name(p.relation).to_string(),
                precision: p.precision,
                n_pos: p.n_pos,
            })
            .collect(),
        omitted: absent.iter().map(|&r| graph.relation_name(r).to_string()).collect(),
    })
}
