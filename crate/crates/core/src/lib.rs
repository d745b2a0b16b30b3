pub mod atomic;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod train;

pub use error::{Error, Result};
