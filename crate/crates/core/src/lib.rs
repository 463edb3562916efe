//! Episodic meta-training with task augmentation for domain generalization.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a matrix reverse-mode tape, generic over the scalar type so
//!   that dual numbers yield exact Hessian-vector products.
//! - [`data`]: multi-domain datasets, synthetic shifted benchmarks, the
//!   on-disk domain format, seeded splits and batch sampling.
//! - [`episodes`]: task sampling and mixed task sampling of meta-tasks.
//! - [`model`]: feature extractor, cosine classifier and prototypes.
//! - [`losses`]: task loss, sample-wise and prototype-wise alignment.
//! - [`metatrain`]: the bilevel training loop and the pooled baseline.
//! - [`eval`]: metrics, leave-one-domain-out grids and diagnostics.
//! - [`config`], [`checkpoint`] and [`cli`]: the experiment runner.

// Validation uses `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metatrain;
pub mod model;

pub use error::{Error, Result};

// The guide's chapters are compiled as doctests so its snippets cannot rot.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/domains.md")]
    mod domains {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/bilevel.md")]
    mod bilevel {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
