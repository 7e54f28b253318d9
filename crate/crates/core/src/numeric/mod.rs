//! Numeric substrate: tensors, seeded randomness, kernels, and reverse-mode
//! differentiation. Values are 32-bit floats; reductions accumulate in f64.

pub mod engine;
pub mod kernels;
pub mod par;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;
