pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod train;
