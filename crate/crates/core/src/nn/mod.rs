//! Layer forward/backward rules: convolution, dense, batch normalization,
//! relu, max pooling, global average pooling, residual addition and fused
//! softmax cross-entropy.

mod conv;
mod dense;
mod layer;
mod loss;
mod norm;
mod pool;

pub use conv::{conv2d, Conv2dGeometry, Padding};
pub use dense::dense;
pub use layer::{Layer, LayerKind, Mode, Param, ParamAllocator, Pass};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use norm::{
    batchnorm_eval, batchnorm_train, update_running_stats, BatchStats, BN_EPS, BN_MOMENTUM,
};
pub use pool::{global_avg_pool, maxpool2d};
