//! Differentiable primitives. Each op reads its inputs from a [`Tape`],
//! pushes its output, and registers the matching backward rule.
//!
//! [`Tape`]: crate::autograd::Tape

mod attention;
mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod pool;
mod shape;

pub use attention::{attention, attention_weights};
pub use conv::{conv2d, conv2d_forward, Conv2dSpec};
pub use elementwise::{add, dropout, relu, scale_channels, sigmoid, sum, weighted_sum};
pub use linear::{linear, linear_forward};
pub use loss::{cross_entropy, softmax_cross_entropy};
pub use norm::{batch_norm, BatchNormSpec, RunningStats};
pub use pool::{global_avg_pool, max_pool2d};
pub use shape::{channel_shuffle, channel_shuffle_tensor, chunk, concat, narrow};
