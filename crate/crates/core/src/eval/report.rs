use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    /// Maximize F1 over the scores being evaluated.
    Tuned,
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Fixed(0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationRow {
    pub name: String,
    pub precision: f64,
    pub n_pos: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub part: String,
    pub ap: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub tuned: bool,
    pub positives: usize,
    pub negatives: usize,
    pub ratio: usize,
    pub seed: u64,
    pub relations: Vec<RelationRow>,
    /// Relations with no predicted positive.
    pub omitted: Vec<String>,
}

impl EvalReport {
    /// `key = value` lines grouped in `[section]`s. Floats use the shortest
    /// round-trip rendering, so [`EvalReport::parse`] restores them exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[metrics]");
        let _ = writeln!(s, "ap = {}", self.ap);
        let _ = writeln!(s, "f1 = {}", self.f1);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "recall = {}", self.recall);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "threshold_mode = {}", if self.tuned { "tuned" } else { "fixed" });
        let _ = writeln!(s, "\n[counts]");
        let _ = writeln!(s, "part = {}", self.part);
        let _ = writeln!(s, "positives = {}", self.positives);
        let _ = writeln!(s, "negatives = {}", self.negatives);
        let _ = writeln!(s, "ratio = {}", self.ratio);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[per_relation]");
        for r in &self.relations {
            let _ = writeln!(s, "{} = {} {}", r.name, r.precision, r.n_pos);
        }
        let _ = writeln!(s, "\n[omitted]");
        for name in &self.omitted {
            let _ = writeln!(s, "{name} = no predicted positives");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut section = "";
        let mut r = EvalReport {
            part: String::new(),
            ap: f64::NAN,
            f1: f64::NAN,
            precision: f64::NAN,
            recall: f64::NAN,
            threshold: f64::NAN,
            tuned: false,
            positives: 0,
            negatives: 0,
            ratio: 0,
            seed: 0,
            relations: Vec::new(),
            omitted: Vec::new(),
        };
        for (no, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::data(format!("report line {}: {what}", no + 1));
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name {
                    "metrics" => "metrics",
                    "counts" => "counts",
                    "per_relation" => "per_relation",
                    "omitted" => "omitted",
                    _ => return Err(bad("unknown section")),
                };
                continue;
            }
            let (key, value) = line.rsplit_once(" = ").ok_or_else(|| bad("expected `key = value`"))?;
            fn num<T: FromStr>(v: &str, bad: impl Fn(&str) -> Error) -> Result<T> {
                v.parse().map_err(|_| bad("unparsable number"))
            }
            match (section, key) {
                ("metrics", "ap") => r.ap = num(value, bad)?,
                ("metrics", "f1") => r.f1 = num(value, bad)?,
                ("metrics", "precision") => r.precision = num(value, bad)?,
                ("metrics", "recall") => r.recall = num(value, bad)?,
                ("metrics", "threshold") => r.threshold = num(value, bad)?,
                ("metrics", "threshold_mode") => r.tuned = value == "tuned",
                ("counts", "part") => r.part = value.to_string(),
                ("counts", "positives") => r.positives = num(value, bad)?,
                ("counts", "negatives") => r.negatives = num(value, bad)?,
                ("counts", "ratio") => r.ratio = num(value, bad)?,
                ("counts", "seed") => r.seed = num(value, bad)?,
                ("per_relation", name) => {
                    let (p, n) = value.split_once(' ').ok_or_else(|| bad("expected `precision n_pos`"))?;
                    r.relations.push(RelationRow {
                        name: name.to_string(),
                        precision: num(p, bad)?,
                        n_pos: num(n, bad)?,
                    });
                }
                ("omitted", name) => r.omitted.push(name.to_string()),
                _ => return Err(bad("unexpected key")),
            }
        }
        Ok(r)
    }

    /// `relation,precision,n_pos`.
    pub fn relation_csv(&self) -> String {
        let mut s = String::from("relation,precision,n_pos\n");
        for r in &self.relations {
            let _ = writeln!(s, "{},{},{}", r.name, r.precision, r.n_pos);
        }
        s
    }

    pub fn write(&self, report_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(report_path, self.to_text()).map_err(|e| Error::io(report_path, e))?;
        std::fs::write(csv_path, self.relation_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = EvalReport {
            part: "test".into(),
            ap: 0.1 + 0.2,
            f1: 2.0 / 3.0,
            precision: 1.0,
            recall: 0.0,
            threshold: 0.5,
            tuned: true,
            positives: 10,
            negatives: 30,
            ratio: 3,
            seed: u64::MAX,
            relations: vec![RelationRow {
                name: "drug_disease".into(),
                precision: 1.0 / 7.0,
                n_pos: 4,
            }],
            omitted: vec!["protein_protein".into()],
        };
        assert_eq!(EvalReport::parse(&r.to_text()).unwrap(), r);
        assert_eq!(r.relation_csv(), format!("relation,precision,n_pos\ndrug_disease,{},4\n", 1.0 / 7.0));
        assert!(EvalReport::parse("[nope]\n").is_err());
    }
}
