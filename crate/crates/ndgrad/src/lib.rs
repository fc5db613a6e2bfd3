//! Minimal reverse-mode differentiation for convolutional embedding
//! networks: convolution, batchnorm, pooling, affine maps, the two
//! training losses, momentum SGD and a binary checkpoint format.

mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
pub mod loss;
mod params;
mod sgd;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use error::{NdError, Result};
pub use kernels::ConvGeom;
pub use params::{Param, ParamSet};
pub use sgd::{Sgd, SgdConfig};
pub use tape::{BnMode, BnStats, Gradients, PoolGeom, Tape, Var, BN_EPS};
pub use tensor::Tensor;
