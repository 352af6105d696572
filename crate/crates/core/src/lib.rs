//! Learnable separable kernels (LSKs) for single-image super-resolution.
//!
//! An LSK layer replaces a square `n×n` convolution with a vertical `n×1`
//! stage and a horizontal `1×n` stage. No activation sits between the two,
//! so they can always be merged back into one square layer whose kernels are
//! sums of rank-1 matrices.
//!
//! Modules, bottom-up:
//! - [`tensor`]: NCHW tensors and the seeded RNG
//! - [`conv`]: convolution, activations and pixel shuffle, forward and backward
//! - [`lsk`]: merging, SVD factorization and decomposition of kernels
//! - [`complexity`]: model specs, parameter and operation counts
//! - [`imaging`]: PNG I/O, luminance, bicubic resampling, PSNR/SSIM, patches
//! - [`train`]: network construction, backprop, optimizers and training

pub mod complexity;
pub mod conv;
pub mod error;
pub mod imaging;
pub mod lsk;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims, Element, Rng, Tensor4};
