//! A self-contained laboratory for studying compositional generalization in
//! feedforward networks.
//!
//! The pipeline: a *hyperteacher* ([`taskfam`]) generates families of regression
//! tasks by composing a few of its weight modules; task descriptions are mapped
//! through one of six encodings ([`encodings`]); training supports with
//! controlled coverage are constructed over the task space ([`support`]); MLP
//! students are trained from scratch ([`nn`]) and evaluated on held-out tasks;
//! hidden representations are probed with linear decoders ([`probe`]); and an
//! explicit ReLU network approximating any given teacher can be compiled and
//! verified against its analytic error budget ([`construct`]). The [`runner`]
//! module orchestrates experiments, sweeps, and CSV reporting.

pub mod construct;
pub mod encodings;
mod error;
pub mod linalg;
pub mod nn;
pub mod probe;
pub mod report;
pub mod rng;
pub mod runner;
pub mod support;
pub mod taskfam;

pub use error::{Error, Result};
