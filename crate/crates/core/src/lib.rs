//! Dual-branch long-tailed recognition.
//!
//! An imbalanced-learning branch (shared backbone plus linear classifier,
//! trained with LDAM margins) is paired with a contrastive branch that samples
//! tail-class episodes and trains the same backbone with a prototype metric
//! loss and two cosine contrastive losses. The two objectives are blended with
//! a parabolic schedule over epochs.
//!
//! Everything runs on [`diffcore`], a small reverse-mode autodiff engine, so
//! the whole pipeline is checkable against finite differences and the
//! graph-free formulas in [`oracle`].

// `add`/`mul`/... on `Var` are fallible graph ops, not operator traits, and
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod registry;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
