//! Convolutional-dictionary single-image deraining.
//!
//! A rainy image is modeled as `O = B + R` where the rain layer `R` is
//! synthesized by convolving a small bank of rain kernels with sparse
//! per-kernel activation maps. Separating `(M, B)` from `O` is posed as a
//! regularized least-squares problem and solved by an unfolded alternating
//! proximal-gradient scheme; the proximal operators are either analytic
//! (soft threshold, box projection) or small learnable residual networks
//! trained end to end together with the kernels and step sizes.
//!
//! Module map:
//! - [`tensor`]: planes, generic tensors, 2-D convolution and its adjoint,
//!   the RCDT binary tensor format.
//! - [`model`]: images, rain-map stacks, kernel banks, the synthesis map,
//!   objective and fidelity gradients.
//! - [`prox`]: analytic proximal operators and the learnable residual
//!   operator with hand-written reverse-mode derivatives.
//! - [`solver`]: the S-stage unfolded solver, step-size bound, stage traces.
//! - [`train`]: stage-wise loss, exact gradients through all stages, Adam,
//!   checkpoints.
//! - [`synth`]: synthetic streak rendering and exact-model pair generation.
//! - [`metrics`]: luminance-channel PSNR and SSIM.
//! - [`imgio`] / [`dataset`]: PNG I/O and the on-disk dataset layout.
//! - [`cli`]: the `derain` binary's subcommands.
//!
//! The runnable examples under `examples/` walk one capability each; see
//! the README for the tour.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod imgio;
pub mod metrics;
pub mod model;
pub mod prox;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
