//! Block-wise and end-to-end training steps, SGD with momentum and weight
//! decay, learning-rate schedules and evaluation.

mod eval;
mod sgd;
mod step;

pub use eval::{error_rate, evaluate, Evaluation, Predictor};
pub use sgd::{apply_gradients, lr_at, sgd_update, Schedule, SgdConfig, Velocities};
pub use step::{
    block_forward, bp_step, bwbpf_step, global_update, local_update, loss_terms, weighted_total,
    BlockForward, LossTerms, LossWeights, StepMetrics, TrainState,
};
