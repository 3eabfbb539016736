//! Depth-usage probes for small pre-norm transformers.
//!
//! The crate bundles a traced transformer ([`model`]), three families of
//! depth measurements built on its residual stream ([`intervention`],
//! [`lens`], [`scoring`]), a synthetic protein-like data source with an exact
//! likelihood ([`synth`]), a hand-differentiated trainer ([`train`]) and
//! CSV/SVG emitters ([`report`]).
//!
//! Data-parallel loops go through [`par::Exec`]; with the `parallel` feature
//! disabled every loop runs sequentially and produces identical results.

pub mod error;
pub mod intervention;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod par;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Objective, Prompt, ResidualTrace};
pub use numerics::{Matrix, ProbVector, Real};
pub use par::Exec;
