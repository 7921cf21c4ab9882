//! Training-free few-shot classification from per-attention-head Gaussian
//! discriminants.
//!
//! Each attention head of a frozen multimodal model yields one vector per
//! input. A shared-covariance Gaussian discriminant is fit per head from a
//! handful of labelled support samples, heads are ranked on that support
//! set, and the best heads vote by averaging class probabilities.
//!
//! The crate also provides the closed-form baselines, a synthetic data
//! generator with planted discriminative heads, and a seeded episodic
//! evaluation harness.

// `!(x > 0.0)` is the intended form: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod gda;
pub mod head_ranking;
pub mod parallel;
pub mod rng;
pub mod synth;

pub use error::{HecError, Result};
pub use feature_store::{read_bank, sample_episode, write_bank, Episode, FeatureBank, Manifest, SampleKind};
pub use gda::{fit_all_heads, fit_head, HeadGda};
pub use head_ranking::{select_top_k, HeadKind, HeadScores, HeadSelection};
