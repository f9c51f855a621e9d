//! Core library for the module-network VQA framework: the program language,
//! the synthetic grid-world benchmark, the program-generator and
//! execution-engine agents, and the iterated-learning trainer.

pub mod data;
pub mod il;
pub mod ee;
pub mod lang;
pub mod pg;

/// Training-time instantiations; oracle tests use the f64 versions directly.
pub type ProgramGenerator32 = pg::ProgramGenerator<f32>;
pub type ExecutionEngine32 = ee::ExecutionEngine<f32>;
