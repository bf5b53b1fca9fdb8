//! Sequence-parallel tensor-program compiler and multi-rank simulator.
//!
//! Pipeline: build or load a high-level transformer graph ([`ir`]), rewrite it
//! for Ulysses-style sequence parallelism ([`sp_pass`]), lower it and append
//! its backward ([`autodiff`]), choose which activations to keep with a min-cut
//! ([`ac_pass`]), then execute on simulated ranks ([`executor`]) or estimate
//! FLOPs and memory ([`cost_model`]).

pub mod ac_pass;
pub mod autodiff;
pub mod cost_model;
pub mod dims;
pub mod error;
pub mod executor;
pub mod ir;
pub mod parallel;
pub mod presets;
pub mod sp_pass;
pub mod testgen;

pub use dims::ModelDims;
pub use error::{Error, Result};
