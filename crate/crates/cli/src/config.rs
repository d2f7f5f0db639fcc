//! Line-based `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is listed in
//! [`KEYS`]; anything else is rejected. Paths are relative to the config
//! file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kgforge::eval::ThresholdMode;
use kgforge::fusion::FusionMethod;
use kgforge::gcl::{GclConfig, GclMethod};
use kgforge::graph::SplitPart;
use kgforge::kge::KgeConfig;
use kgforge::modality::{Modality, DEFAULT_DIM};
use kgforge::numerics::OptimConfig;
use kgforge::pipeline::FeatureConfig;
use kgforge::{Error, Result};

/// `(key, default, meaning)`. `embedding.<tag>` keys are accepted in
/// addition.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("nodes", "", "node table (TSV)"),
    ("triples", "", "triple table (TSV)"),
    ("out", "out", "output directory"),
    ("split_file", "<out>/split.tsv", "edge split to write or read"),
    ("mock_embeddings", "false", "generate sequence/description tables instead of loading"),
    ("seed", "0", "master seed"),
    ("split_ratios", "0.6,0.2,0.2", "train,valid,test fractions"),
    ("modality_dim", "768", "width of the modality tables"),
    ("fusion", "attention", "none | attention | redaf"),
    ("fused_dim", "<modality_dim>", "fused width D"),
    ("structural", "false", "learnable structural fusion member"),
    ("gcl", "grace", "none | dgi | ggd-paper | grace"),
    ("feature_source", "auto", "fused | gcl; auto picks gcl unless `gcl = none`"),
    ("freeze_features", "true", "keep pretrained z fixed while training the link predictor"),
    ("dim", "128", "embedding size of the GCL output and the link predictor"),
    ("hidden_dim", "128", "hidden width of the GCL encoder and RGCN"),
    ("neg_ratio", "1", "training negatives per positive"),
    ("learning_rate", "0.001", ""),
    ("batch_size", "128", "random-walk roots per batch"),
    ("epochs", "100", ""),
    ("dropout", "0.2", ""),
    ("reg_weight", "0.01", "lambda"),
    ("reg_alpha", "1.0", "alpha; the regularizer weight is alpha * lambda"),
    ("max_grad_norm", "1.0", ""),
    ("warmup_steps", "200", ""),
    ("patience", "3", ""),
    ("walk_length", "10", ""),
    ("walk_steps", "1000", "walk batches per epoch"),
    ("gcl_learning_rate", "0.001", ""),
    ("gcl_epochs", "100", ""),
    ("gcl_steps_per_epoch", "10", ""),
    ("gcl_warmup_steps", "50", ""),
    ("gcl_patience", "3", ""),
    ("p_mask", "0.2", "feature masking probability"),
    ("p_drop", "0.2", "edge dropping probability"),
    ("tau", "0.5", "GRACE temperature"),
    ("intra_view_negatives", "false", ""),
    ("threads", "4", "parallel pretraining jobs (KGFORGE_THREADS caps it)"),
    ("eval_part", "test", "train | valid | test"),
    ("eval_ratios", "1,3,5", "negative ratios to report"),
    ("threshold", "0.5", "F1 threshold, or `tuned`"),
    ("export_nodes", "all", "comma-separated node ids or `all`"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub nodes: PathBuf,
    pub triples: PathBuf,
    pub out: PathBuf,
    pub split_file: PathBuf,
    pub embeddings: Vec<(Modality, PathBuf)>,
    pub mock_embeddings: bool,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub modality_dim: usize,
    pub features: FeatureConfig,
    /// Train on exported z tables rather than fusing on the fly.
    pub use_z_tables: bool,
    pub kge: KgeConfig,
    pub threads: usize,
    pub eval_part: SplitPart,
    pub eval_ratios: Vec<usize>,
    pub threshold: ThresholdMode,
    pub export_nodes: Option<Vec<usize>>,
    /// Resolved `key = value` pairs, for manifests.
    pub snapshot: BTreeMap<String, String>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// Reads `key = value` pairs, rejecting unknown and repeated keys.
pub fn read_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !k.starts_with("embedding.") && !KEYS.iter().any(|(name, _, _)| *name == k) {
            return Err(Error::config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("line {}: `{k}` given twice", i + 1)));
        }
    }
    Ok(pairs)
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub neg_ratio: Option<usize>,
    pub fusion: Option<String>,
    pub gcl: Option<String>,
    pub freeze_features: bool,
    pub dim: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_text(&text, &base, overrides)
    }

    pub fn from_text(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut pairs = read_pairs(text)?;
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.insert(k.to_string(), v);
            }
        };
        set("seed", overrides.seed.map(|s| s.to_string()));
        set("neg_ratio", overrides.neg_ratio.map(|s| s.to_string()));
        set("fusion", overrides.fusion.clone());
        set("gcl", overrides.gcl.clone());
        set("dim", overrides.dim.map(|s| s.to_string()));
        set("out", overrides.out.as_ref().map(|p| p.display().to_string()));
        if overrides.freeze_features {
            pairs.insert("freeze_features".into(), "true".into());
        }

        let get = |k: &str| -> String {
            pairs.get(k).cloned().unwrap_or_else(|| {
                KEYS.iter()
                    .find(|(name, _, _)| *name == k)
                    .map(|(_, d, _)| d.to_string())
                    .unwrap_or_default()
            })
        };
        let path_of = |k: &str| -> Result<PathBuf> {
            let v = get(k);
            if v.is_empty() {
                return Err(Error::config(format!("`{k}` is required")));
            }
            Ok(base.join(v))
        };

        // A command-line `--out` is relative to the working directory.
        let out = match &overrides.out {
            Some(p) => p.clone(),
            None => base.join(get("out")),
        };
        let split_file = match pairs.get("split_file") {
            Some(v) => base.join(v),
            None => out.join("split.tsv"),
        };
        let mut embeddings = Vec::new();
        for (k, v) in &pairs {
            if let Some(tag) = k.strip_prefix("embedding.") {
                embeddings.push((Modality::from_str(tag)?, base.join(v)));
            }
        }
        let ratios: Vec<f64> = parse_list("split_ratios", &get("split_ratios"))?;
        if ratios.len() != 3 {
            return Err(Error::config("`split_ratios` needs three values"));
        }
        let modality_dim: usize = match pairs.get("modality_dim") {
            Some(v) => parse("modality_dim", v)?,
            None => DEFAULT_DIM,
        };
        let fused_dim: usize = match pairs.get("fused_dim") {
            Some(v) => parse("fused_dim", v)?,
            None => modality_dim,
        };
        let fusion: FusionMethod = get("fusion").parse()?;
        let gcl_method: GclMethod = get("gcl").parse()?;
        let dim: usize = parse("dim", &get("dim"))?;
        let hidden_dim: usize = parse("hidden_dim", &get("hidden_dim"))?;

        let optim = OptimConfig {
            learning_rate: parse("learning_rate", &get("learning_rate"))?,
            batch_size: parse("batch_size", &get("batch_size"))?,
            epochs: parse("epochs", &get("epochs"))?,
            dropout: parse("dropout", &get("dropout"))?,
            reg_weight: parse("reg_weight", &get("reg_weight"))?,
            max_grad_norm: parse("max_grad_norm", &get("max_grad_norm"))?,
            warmup_steps: parse("warmup_steps", &get("warmup_steps"))?,
            patience: parse("patience", &get("patience"))?,
        };
        let gcl = GclConfig {
            method: gcl_method,
            hidden_dim,
            out_dim: dim,
            p_mask: parse("p_mask", &get("p_mask"))?,
            p_drop: parse("p_drop", &get("p_drop"))?,
            tau: parse("tau", &get("tau"))?,
            intra_view_negatives: parse_bool("intra_view_negatives", &get("intra_view_negatives"))?,
            steps_per_epoch: parse("gcl_steps_per_epoch", &get("gcl_steps_per_epoch"))?,
            optim: OptimConfig {
                learning_rate: parse("gcl_learning_rate", &get("gcl_learning_rate"))?,
                epochs: parse("gcl_epochs", &get("gcl_epochs"))?,
                warmup_steps: parse("gcl_warmup_steps", &get("gcl_warmup_steps"))?,
                patience: parse("gcl_patience", &get("gcl_patience"))?,
                ..optim.clone()
            },
        };
        let kge = KgeConfig {
            hidden_dim,
            dim,
            neg_ratio: parse("neg_ratio", &get("neg_ratio"))?,
            walk_length: parse("walk_length", &get("walk_length"))?,
            walk_steps: parse("walk_steps", &get("walk_steps"))?,
            reg_alpha: parse("reg_alpha", &get("reg_alpha"))?,
            optim,
        };
        let eval_part = match get("eval_part").as_str() {
            "train" => SplitPart::Train,
            "valid" => SplitPart::Valid,
            "test" => SplitPart::Test,
            other => return Err(Error::config(format!("`eval_part`: unknown part `{other}`"))),
        };
        let threshold = match get("threshold").as_str() {
            "tuned" => ThresholdMode::Tuned,
            v => {
                let t: f64 = parse("threshold", v)?;
                if !(t > 0.0 && t < 1.0) {
                    return Err(Error::config(format!("`threshold` must lie in (0, 1), got {t}")));
                }
                ThresholdMode::Fixed(t)
            }
        };
        let export_nodes = match get("export_nodes").as_str() {
            "all" => None,
            v => Some(parse_list("export_nodes", v)?),
        };
        let mut eval_ratios: Vec<usize> = parse_list("eval_ratios", &get("eval_ratios"))?;
        if let Some(r) = overrides.neg_ratio {
            eval_ratios = vec![r];
        }
        if eval_ratios.contains(&0) {
            return Err(Error::config("`eval_ratios` must all be >= 1"));
        }

        let use_z_tables = match get("feature_source").as_str() {
            "auto" => gcl.method != GclMethod::None,
            "gcl" => true,
            "fused" => false,
            other => return Err(Error::config(format!("`feature_source`: unknown source `{other}`"))),
        };
        let cfg = RunConfig {
            nodes: path_of("nodes")?,
            triples: path_of("triples")?,
            out,
            split_file,
            embeddings,
            mock_embeddings: parse_bool("mock_embeddings", &get("mock_embeddings"))?,
            seed: parse("seed", &get("seed"))?,
            split_ratios: [ratios[0], ratios[1], ratios[2]],
            modality_dim,
            features: FeatureConfig {
                fusion,
                dim: fused_dim,
                structural: parse_bool("structural", &get("structural"))?,
                gcl,
                freeze: parse_bool("freeze_features", &get("freeze_features"))?,
            },
            use_z_tables,
            kge,
            threads: parse("threads", &get("threads"))?,
            eval_part,
            eval_ratios,
            threshold,
            export_nodes,
            snapshot: BTreeMap::new(),
        };
        let mut snapshot = BTreeMap::new();
        for (k, _, _) in KEYS {
            snapshot.insert(k.to_string(), get(k));
        }
        for (m, p) in &cfg.embeddings {
            snapshot.insert(format!("embedding.{m}"), p.display().to_string());
        }
        snapshot.insert("modality_dim".into(), modality_dim.to_string());
        snapshot.insert("fused_dim".into(), fused_dim.to_string());
        snapshot.insert("split_file".into(), cfg.split_file.display().to_string());
        Ok(RunConfig { snapshot, ..cfg })
    }

    /// `threads`, capped by `KGFORGE_THREADS` when set.
    pub fn effective_threads(&self) -> Result<usize> {
        let cap = match std::env::var("KGFORGE_THREADS") {
            Ok(v) => Some(parse::<usize>("KGFORGE_THREADS", v.trim())?),
            Err(_) => None,
        };
        Ok(match cap {
            Some(c) => self.threads.min(c).max(1),
            None => self.threads.max(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "nodes = n.tsv\ntriples = t.tsv\n";

    fn load(text: &str) -> Result<RunConfig> {
        RunConfig::from_text(text, Path::new("/data"), &Overrides::default())
    }

    #[test]
    fn defaults_and_paths() {
        let c = load(MIN).unwrap();
        assert_eq!(c.nodes, Path::new("/data/n.tsv"));
        assert_eq!(c.split_file, Path::new("/data/out/split.tsv"));
        assert_eq!(c.kge.dim, 128);
        assert_eq!(c.features.dim, 768);
        assert_eq!(c.eval_ratios, vec![1, 3, 5]);
        assert_eq!(c.threshold, ThresholdMode::Fixed(0.5));
        assert_eq!(c.kge.optim.reg_weight, 0.01);
        assert_eq!(c.features.gcl.optim.epochs, 100);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        let e = load(&format!("{MIN}learning_rat = 0.1\n")).unwrap_err();
        assert!(e.to_string().contains("learning_rat"));
        assert!(load(&format!("{MIN}seed = 1\nseed = 2\n")).is_err());
        assert!(load("triples = t.tsv").unwrap_err().to_string().contains("nodes"));
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            seed: Some(9),
            gcl: Some("dgi".into()),
            dim: Some(64),
            ..Overrides::default()
        };
        let c = RunConfig::from_text(&format!("{MIN}seed = 1 # comment\ngcl = grace\n"), Path::new("."), &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.features.gcl.method, GclMethod::Dgi);
        assert_eq!((c.kge.dim, c.features.gcl.out_dim), (64, 64));
        assert_eq!(c.snapshot["seed"], "9");
    }

    #[test]
    fn enum_errors_name_the_value() {
        let e = load(&format!("{MIN}fusion = mean\n")).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("mean"));
        assert!(load(&format!("{MIN}threshold = 1.5\n")).is_err());
        assert!(load(&format!("{MIN}embedding.sequence = s.tsv\n")).unwrap().embeddings.len() == 1);
    }
}
