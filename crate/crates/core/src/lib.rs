pub mod autodiff;
pub mod error;
pub mod gsun;
pub mod neural;
pub mod numcore;
pub mod pit;
pub mod sun;
pub mod trunc_mvn;

pub use error::{Error, Result};
