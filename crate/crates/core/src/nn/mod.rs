//! Numeric core: tensors, LSTM layers with explicit backward passes,
//! temporal pooling, softmax cross-entropy, clipped SGD and a finite
//! difference gradient checker.
//!
//! Sequence batches are stored time-major: row `t * batch + b` holds
//! timestep `t` of sequence `b` (see [`SeqLayout`]).

mod dropout;
mod gradcheck;
mod loss;
mod lstm;
mod optim;
mod pool;
mod tensor;

pub use dropout::dropout_mask;
pub use gradcheck::{finite_diff_check, relative_error};
pub use loss::{softmax_xent_loss, softmax_xent_rows};
pub use lstm::{
    bilstm_backward, bilstm_forward, lstm_cell_step, BiLstmTape, LstmParams, LstmTape, SeqLayout,
};
pub use optim::{clip_and_sgd_step, global_norm, SgdStats};
pub use pool::{
    last_state_backward, last_state_batch, last_state_repr, maxpool_backward, maxpool_batch,
    maxpool_time, MaxPoolTape,
};
pub use tensor::{gemm, Real, Tensor1, Tensor2};

/// Default gradient clipping threshold (global L2 norm).
pub const DEFAULT_CLIP_NORM: f64 = 2.0;
/// Default initial learning rate.
pub const DEFAULT_LR: f64 = 0.01;
