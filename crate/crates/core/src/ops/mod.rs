//! Differentiable kernels. Each forward has a matching backward taking the
//! upstream gradient and whatever the forward saved.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, Mode, RunningStats};
pub use conv::{conv2d_backward, conv2d_forward};
pub use dense::{dense_backward, dense_forward, relu_backward, relu_forward};
pub use loss::{argmax, softmax_xent};
pub use pool::{avgpool_backward, avgpool_forward, upsample_nearest_backward, upsample_nearest_forward};
