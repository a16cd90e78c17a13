pub mod dataio;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod synthgen;
pub mod trainer;
pub mod cli;
