//! Amortized neural Bayes estimation of the GSUN parameters.

pub mod config;
pub mod graph;
pub mod network;
pub mod train;
pub mod uq;
pub mod weights;

pub use config::{radius_for_layers, sample_prior, EstimatorConfig, PriorSpec, Stopping};
pub use graph::{build_graph, GraphBatch, SpatialGraph};
pub use network::{estimate, forward, masked_loss, EstimatorWeights};
pub use train::{train, TrainLog, TrainRecord};
pub use uq::{uncertainty, QuantileTable, DEFAULT_LEVELS};
pub use weights::{read_weights, write_weights};
