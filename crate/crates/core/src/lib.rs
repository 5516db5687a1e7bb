//! Aerial scene classifier built on a dual-branch convolutional network.
//!
//! Two four-block convolutional branches (3×3 and 5×5 kernels) run side by
//! side. After the first block, a fusion spatial attention module looks at
//! both branches at once, produces a single-channel attention map and
//! rescales both branches with it. The final feature maps are concatenated,
//! globally average pooled and classified by a small MLP head.
//!
//! Everything is implemented on a plain `f64` [`Tensor`] with hand-written
//! forward and backward kernels, and every backward kernel can be checked
//! against central finite differences via [`gradcheck`].
//!
//! Image tensors use NHWC layout (batch, height, width, channel).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
