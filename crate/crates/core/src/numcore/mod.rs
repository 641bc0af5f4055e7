//! Numerical foundations: linear algebra, special functions, random streams
//! and the multivariate normal cdf.

pub mod bessel;
pub mod linalg;
pub mod mvn;
pub mod rng;
pub mod special;

pub use linalg::{DenseMatrix, Vector};
pub use rng::RngStream;
