//! Layer primitives with explicit forward and backward passes.
//!
//! There is no autograd tape: each layer exposes a `backward` that takes the
//! forward input (or a cache from the forward pass) and the upstream gradient.

mod batchnorm;
mod conv;
pub mod gradcheck;
mod layers;
mod loss;
mod pool;
mod rmsprop;

use serde::{Deserialize, Serialize};

pub use batchnorm::{BatchNorm, BatchNormCache, BatchNormGrads};
pub use conv::{conv_output_extent, Conv3d, Conv3dGrads, Padding};
pub use layers::{dropout_backward, dropout_forward, flatten, relu_backward, relu_forward, Dense, DenseGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{MaxPool3d, PoolOutput};
pub use rmsprop::{Rmsprop, RmspropConfig};

/// Whether batch statistics and dropout are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}
