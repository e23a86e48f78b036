//! Holistically-guided decoding for semantic-rich feature upsampling.
//!
//! A small, fully differentiable CPU implementation of:
//!
//! * [`tensor`]: dense tensors, primitive kernels, a reverse-mode tape and a
//!   finite-difference gradient checker;
//! * [`hgd`]: multi-scale fusion, holistic codeword generation, guidance and
//!   codeword assembly;
//! * [`efficientfcn`]: a toy encoder, the segmentation head, SGD training,
//!   metrics and a synthetic dataset;
//! * [`fpn`]: the shared-codeword pyramid decoder with learned fusion
//!   scalars, residual merge and recurrence;
//! * [`cost`]: analytic multiply-accumulate and parameter counts for the
//!   full-size architectures;
//! * [`checks`]: gradient checks over the tiny networks;
//! * [`io`]: the `HGDT` tensor format, PGM dumps and JSON manifests.

pub mod checks;
pub mod cost;
pub mod efficientfcn;
pub mod error;
pub mod fpn;
pub mod hgd;
pub mod io;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
