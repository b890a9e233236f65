//! High-order Plackett-Luce ranking losses for contrastive training, with
//! attention-parameterised transition heads, conflict-gated multi-scale
//! fusion, Gram and relational distillation, and the enumeration and
//! finite-difference oracles that keep every formula honest.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] - matrices, the reverse-mode tape, PCA.
//! * [`transitions`] - pairwise/triple/history transition heads and gates.
//! * [`ranking`] - the order-R Plackett-Luce family and rank losses.
//! * [`fusion`] - spatial-pyramid pooling, channel/spatial attention, the
//!   conflict gate, and the alignment-angle bound checker.
//! * [`distill`] - Gram and relational losses plus the synthetic frozen
//!   teacher and its on-disk cache.
//! * [`objective`] - InfoNCE, the loss schedule, the total objective, AdamW.
//! * [`verify`] - permutation-enumeration and finite-difference oracles.
//! * [`harness`] - synthetic corpus, training loop, order sweep, metrics,
//!   and the CLI plumbing.

pub mod distill;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod numerics;
pub mod objective;
pub mod ranking;
pub mod transitions;
pub mod verify;

pub use error::{Error, Result};
