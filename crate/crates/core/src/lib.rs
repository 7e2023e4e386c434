pub mod bench;
pub mod diffcore;
pub mod genmodel;
pub mod geometry;
pub mod metrics;
pub mod partiality;
pub mod rng;
pub mod sampler;
