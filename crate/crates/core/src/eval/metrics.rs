use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Triple;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredEdge {
    pub triple: Triple,
    pub score: f64,
    pub label: bool,
}

impl ScoredEdge {
    pub fn new(triple: Triple, score: f64, label: bool) -> Self {
        ScoredEdge {
            triple,
            score,
            label,
        }
    }

    pub fn relation(&self) -> usize {
        self.triple.relation
    }
}

fn check_finite(scored: &[ScoredEdge]) -> Result<()> {
    match scored.iter().position(|e| !e.score.is_finite()) {
        Some(i) => Err(Error::data(format!("score #{i} is not finite"))),
        None => Ok(()),
    }
}

/// Indices by descending score; equal scores keep input order.
pub fn rank_order(scored: &[ScoredEdge]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score));
    order
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(scored: &[ScoredEdge]) -> Result<f64> {
    check_finite(scored)?;
    let positives = scored.iter().filter(|e| e.label).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in rank_order(scored).iter().enumerate() {
        if scored[i].label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Confusion counts with `score >= threshold` predicted positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn at(scored: &[ScoredEdge], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for e in scored {
            match (e.score >= threshold, e.label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }

    /// 0 with no predicted positives.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_score(scored: &[ScoredEdge], threshold: f64) -> f64 {
    Confusion::at(scored, threshold).f1()
}

/// Threshold among the observed scores maximizing F1; the highest such
/// threshold wins ties.
pub fn tuned_threshold(scored: &[ScoredEdge]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let total_pos = scored.iter().filter(|e| e.label).count();
    let order = rank_order(scored);
    let mut k = 0;
    while k < order.len() {
        let s = scored[order[k]].score;
        // Consume the whole run of equal scores: they flip together.
        while k < order.len() && scored[order[k]].score == s {
            if scored[order[k]].label {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let c = Confusion {
            tp,
            fp,
            fn_: total_pos - tp,
            tn: 0,
        };
        let f1 = c.f1();
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((s, f1));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrecision {
    pub relation: usize,
    pub precision: f64,
    /// Predicted positives (the precision denominator).
    pub n_pos: usize,
    /// Labelled positives of the relation.
    pub n_true: usize,
}

/// Precision per relation at `threshold`. Relations with no predicted
/// positive are returned separately.
pub fn per_relation_precision(scored: &[ScoredEdge], threshold: f64) -> (Vec<RelationPrecision>, Vec<usize>) {
    let mut groups: BTreeMap<usize, (Confusion, usize)> = BTreeMap::new();
    for e in scored {
        let g = groups.entry(e.relation()).or_default();
        let c = Confusion::at(std::slice::from_ref(e), threshold);
        g.0.tp += c.tp;
        g.0.fp += c.fp;
        g.1 += usize::from(e.label);
    }
    let mut present = Vec::new();
    let mut absent = Vec::new();
    for (relation, (c, n_true)) in groups {
        if c.predicted_positive() == 0 {
            absent.push(relation);
        } else {
            present.push(RelationPrecision {
                relation,
                precision: c.precision(),
                n_pos: c.predicted_positive(),
                n_true,
            });
        }
    }
    (present, absent)
}
