//! Reasoning-graph extraction and analysis over per-step hidden-state traces.
//!
//! The pipeline runs in five stages, each in its own module:
//!
//! 1. [`trace`]: load a trace bundle (manifest + raw float32 payload) and
//!    mean-pool token states into one vector per reasoning segment.
//! 2. [`clustering`]: fit a K-means codebook over every segment vector of the
//!    bundle and map each segment to its nearest centroid.
//! 3. [`graph`]: turn each question's centroid path into a directed graph
//!    weighted by centroid distances.
//! 4. [`metrics`]: cycles, weighted diameter, average path length, clustering
//!    coefficient and small-world index per graph.
//! 5. [`report`]: corpus summaries, layer sweeps and run-vs-run comparisons.
//!
//! [`synth`] produces bundles with known ground truth so every stage can be
//! tested without a language model, and [`pipeline`] wires the stages together
//! for the CLI.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clustering;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod trace;

mod numfmt;

pub use error::{Error, Result};
