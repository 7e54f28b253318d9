pub mod codec;
pub mod model;
pub mod sampler;
pub mod schedule;
