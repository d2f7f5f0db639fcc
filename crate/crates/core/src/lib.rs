//! Training engine for multimodal knowledge-graph link prediction.
//!
//! The pipeline runs in four stages: per-node modality embeddings are fused
//! into one vector per node, optionally refined by contrastive pretraining
//! on each node type's homogeneous subgraph, then fed to an RGCN encoder
//! scored with DistMult for link prediction.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod gcl;
pub mod graph;
pub mod kge;
pub mod modality;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
