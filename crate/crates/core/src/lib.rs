//! Numerical core for a linear-attention / gradient-descent equivalence lab.
//!
//! The crate studies one question at desk scale: when does a forward pass of
//! linear self-attention over a retrieval-augmented prompt coincide with a
//! gradient-descent step on a linearized retrieval objective?  Everything
//! needed to pose and test that question lives here:
//!
//! * [`task`] — synthetic retrieval-augmented regression tasks for two
//!   retriever interfaces (projection-based and dot-product), plus the token
//!   layout that feeds them to attention.
//! * [`attention`] — linear and softmax self-attention forwards, stacked
//!   layers, an MLP input embedding, and document injection into keys/values.
//! * [`gd`] — the unified linearized objective, its exact gradient step, the
//!   closed-form attention weights that reproduce that step, multi-step
//!   trajectories, and a learning-rate line search.
//! * [`autodiff`] — a small reverse-mode tape over dense matrices.
//! * [`model`] — trainable attention predictors (single layer, shared stacks,
//!   MLP-embedded) with analytic and taped gradients.
//! * [`train`] — a plain SGD loop with divergence guards and loss curves.
//! * [`metrics`] — prediction / sensitivity / loss alignment between two
//!   predictors over a task distribution.
//! * [`normalize`] — per-feature normalizers for the tabular studies.
//! * [`tabular`] — in-context task construction from tabular splits.
//! * [`raggd`] — a toy amortized update predictor trained to imitate K steps
//!   of test-time SGD on low-rank adapters.
//!
//! The crate is `no_std` (with `alloc`); file formats, CLI, datasets and
//! parallel drivers live in the companion `raglab` crate.  All arithmetic is
//! `f64`; accumulation orders are fixed so that a given seed reproduces
//! results bit for bit.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gd;
pub mod mat;
pub mod mathx;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod raggd;
pub mod rng;
pub mod tabular;
pub mod task;
pub mod train;

pub use error::{CoreError, Result};
pub use mat::Mat;
