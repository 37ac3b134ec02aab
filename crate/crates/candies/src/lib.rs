//! Streaming novelty detection on top of Gaussian mixture classifiers.
//!
//! The crate models "normal" observations with a Gaussian mixture extended to
//! a classifier, and watches a sample stream for processes the model does not
//! know yet:
//!
//! - In **low-density regions** (outside every component's alpha-region),
//!   suspicious samples are collected in a ring buffer and clustered
//!   incrementally; a cluster reaching `min_pts` members triggers model
//!   adaptation ([`ldr`], [`orchestrator`]).
//! - In **high-density regions**, each component runs an online chi-squared
//!   goodness-of-fit test over distance cells of a sliding window, flagging
//!   overlapping novel processes that a density threshold cannot see
//!   ([`hdr`]).
//!
//! Detected clusters are turned into mixture components and fused into the
//! model at run-time, so the classifier keeps up with its environment
//! ([`mixture`]). The [`harness`] module generates benchmark scenarios,
//! replays streams against the combined detector (and the slower
//! state-variable baseline it is compared with), and computes the evaluation
//! metrics.

pub mod error;
pub mod hdr;
pub mod ldr;
pub mod mixture;
pub mod orchestrator;
pub mod stats;

pub mod harness;

pub use error::{Error, Result};
