//! Primitive operations with hand-written backward passes.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod pool;

pub use activation::{mish, mish_scalar, relu, Activation};
pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward,
    depthwise_separable_conv, separable_reduction_factor, ConvGrads, ConvWeights, Padding,
};
pub use norm::{batch_norm, BatchNormMode, RunningStats};
pub use pool::{avg_pool, avg_pool_backward, max_pool, max_pool_backward};
