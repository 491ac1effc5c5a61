//! Two-city metro inflow forecasting. The crate covers the whole path from
//! raw CSV panels to comparative experiment grids: feature windows and
//! normalization, static/dynamic covariates, cross-city station matching,
//! a small manual-gradient neural kernel, five fusion baselines, the
//! two-stage transfer pipeline, evaluation statistics, and a deterministic
//! synthetic-data generator.
//!
//! Data-parallel sections (similarity matrices, per-station metrics, grid
//! cells) run on rayon when the default `parallel` feature is enabled and
//! fall back to sequential loops without it; both paths produce
//! bit-identical results.

pub mod covariates;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod framework;
pub mod io;
pub mod matching;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
