pub mod analysis;
pub mod checkpoint;
pub mod codebook;
pub mod denoiser;
pub mod geometry;
pub mod sampler;
pub mod schedule;
pub mod tasks;
pub mod trainer;
