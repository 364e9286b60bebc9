//! ssmnd-core: selective state-space scan kernels for N-dimensional data.
//!
//! The crate builds up from a dense `f64` array type and a tape-based
//! reverse-mode autodiff over a closed op set, through the selective scan
//! kernel and its multi-directional layer/block designs, to a full model
//! with checkpointing, 2D→3D weight inflation, receptive-field and FLOP
//! analysis, and a desk-scale training harness over synthetic tasks.

pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod inflate;
pub mod layer;
pub mod math;
pub mod model;
pub mod ordering;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::NdArray;
