//! Single-image super-resolution toolkit built around an explicit model of
//! the natural image manifold.
//!
//! The pieces fit together like this: [`resample`] defines the degradation
//! operator that links HR and LR grids, [`synth`] manufactures off-manifold
//! training negatives (blurred interpolants and DCT-domain noise), [`nmd`]
//! trains a binary naturalness discriminator over those negatives with a
//! difficulty curriculum, [`networks`] and [`train`] build and fit the
//! super-resolution generators against reconstruction, naturalness and
//! relativistic-adversarial losses, and [`eval`] scores the results. All
//! differentiable computation runs on the small reverse-mode engine in
//! [`graph`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dct;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod nmd;
pub mod optim;
pub mod parallel;
pub mod pngio;
pub mod resample;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Image, Tensor};
