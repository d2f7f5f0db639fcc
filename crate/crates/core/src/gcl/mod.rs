//! Contrastive pretraining of one GCN encoder per node type.

mod augment;
mod encoder;
mod losses;
mod pretrain;

use std::fmt;
use std::str::FromStr;

pub use augment::{augment, draw_augmentation, AugmentRecord, GraphView};
pub use encoder::{normalized_adjacency, GcnEncoder, GraceHead};
pub use losses::{dgi_loss, dgi_summary, ggd_loss, info_nce, jsd};
pub use pretrain::{pretrain, write_curve, PretrainOutput, TypeModel};

use crate::error::{Error, Result};
use crate::numerics::OptimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GclMethod {
    None,
    Dgi,
    /// Edge-reconstruction BCE.
    GgdPaper,
    Grace,
}

impl GclMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            GclMethod::None => "none",
            GclMethod::Dgi => "dgi",
            GclMethod::GgdPaper => "ggd-paper",
            GclMethod::Grace => "grace",
        }
    }
}

impl fmt::Display for GclMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GclMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GclMethod::None),
            "dgi" => Ok(GclMethod::Dgi),
            "ggd-paper" => Ok(GclMethod::GgdPaper),
            "grace" => Ok(GclMethod::Grace),
            other => Err(Error::config(format!(
                "unknown gcl method `{other}` (none|dgi|ggd-paper|grace)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GclConfig {
    pub method: GclMethod,
    pub hidden_dim: usize,
    /// Output size k of the exported embeddings.
    pub out_dim: usize,
    pub p_mask: f64,
    pub p_drop: f64,
    /// GRACE temperature.
    pub tau: f64,
    pub intra_view_negatives: bool,
    /// Optimizer steps per pretraining epoch; the epoch loss is their mean.
    pub steps_per_epoch: usize,
    pub optim: OptimConfig,
}

impl Default for GclConfig {
    fn default() -> Self {
        GclConfig {
            method: GclMethod::Grace,
            hidden_dim: 128,
            out_dim: 128,
            p_mask: 0.2,
            p_drop: 0.2,
            tau: 0.5,
            intra_view_negatives: false,
            steps_per_epoch: 10,
            optim: OptimConfig::default(),
        }
    }
}

impl GclConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("gcl_tau must be > 0, got {}", self.tau)));
        }
        for (k, p) in [("gcl_p_mask", self.p_mask), ("gcl_p_drop", self.p_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{k} must lie in [0, 1], got {p}")));
            }
        }
        if self.hidden_dim == 0 || self.out_dim == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("gcl dims and steps_per_epoch must be >= 1"));
        }
        if self.optim.epochs * self.steps_per_epoch <= self.optim.warmup_steps {
            return Err(Error::config(format!(
                "gcl run of {} steps does not exceed warmup_steps = {}",
                self.optim.epochs * self.steps_per_epoch,
                self.optim.warmup_steps
            )));
        }
        Ok(())
    }
}
