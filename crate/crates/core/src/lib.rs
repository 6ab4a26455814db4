//! Binocular depth estimation by cross-view pattern retrieval.
//!
//! The master (left) view is encoded by a vision transformer whose tokens are
//! rectified with tokens retrieved from the reference (right) view through
//! polarized, epipolar-gated cross-attention. Depth is decoded by a
//! multi-scale fusion head and trained self-supervised with a photometric
//! reprojection objective.

pub mod architecture;
pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
