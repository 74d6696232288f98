pub mod bem;
pub mod channel;
pub mod config;
pub mod coordination;
pub mod dataset;
pub mod geometry;
pub mod identification;
pub mod neuralnet;
pub mod rng;
pub mod scenario;
