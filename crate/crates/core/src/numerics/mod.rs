//! Dense tensors, reverse-mode differentiation and the optimizer stack.

mod optim;
mod params;
mod rng;
mod sparse;
mod tape;
mod tensor;

pub use optim::{
    adam_step, clip_gradients, optimizer_step, schedule_lr, OptimConfig, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use params::{read_tensors, write_tensors, ParamStore, OPT_PREFIX};
pub use rng::{dropout_mask, glorot, seeded_rng, sub_seed, Rng64};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use std::sync::Arc;

/// Dropout between layers: identity in eval mode (or at rate 0), inverted
/// dropout drawn from `rng` otherwise.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, train: bool, rng: &mut Rng64) -> crate::Result<Var> {
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    tape.dropout_with_mask(x, dropout_mask(n, rate, rng))
}

/// Shared row-index list for gather/scatter ops.
pub fn indices(v: Vec<usize>) -> Arc<Vec<usize>> {
    Arc::new(v)
}
