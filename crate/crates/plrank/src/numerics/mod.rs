//! Dense linear algebra and the differentiable kernel layer.
//!
//! Everything downstream builds on three pieces: the [`Matrix`] value type,
//! the reverse-mode [`Tape`], and the PCA reduction used by the teacher
//! cache. All operations are deterministic and 64-bit.

pub mod matrix;
pub mod pca;
pub mod tape;

pub use matrix::{argsort_desc, cosine, Matrix};
pub use pca::{fit_pca, jacobi_eigh, pca_reduce, solve_psd, PcaBasis};
pub use tape::{
    layer_norm_forward, log_softmax_masked_forward, sigmoid, softmax_forward, GradStore, Tape, Var,
};

/// Epsilon used by every layer-norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;
