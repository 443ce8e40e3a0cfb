//! Small layer toolkit on top of candle tensors.

mod bn_op;
mod conv;
mod layers;
mod params;
pub mod resample;

pub use bn_op::batch_norm_train;
pub use conv::{conv2d, conv2d_bias};
pub use layers::{instance_norm, l2_normalize, log_softmax_channels, sigmoid, BatchNorm, Conv2d, ConvBn, Ctx, Linear};
pub use params::{Entry, ParamStore};
pub use resample::{resize, resize_plane, Interp};

/// Epsilon used in every L2-norm denominator.
pub const NORM_EPS: f64 = 1e-8;
