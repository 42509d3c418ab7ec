//! Desk-scale EdgeAI toolkit: a small CNN training engine, data-free
//! distillation from activation metadata, filter-graph partitioning into
//! networks of independent students, and an analytic simulator for
//! distributed inference on memory-constrained devices.

mod codec;
pub mod config;
pub mod data;
pub mod deploy;
pub mod distill;
pub mod dream;
pub mod error;
pub mod experiments;
pub mod fan;
pub mod nonn;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Real, Sgd, Tape, Tensor, Var};
pub use zoo::{Model, ModelSpec};
