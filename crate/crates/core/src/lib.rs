pub mod classifier;
pub mod concepts;
pub mod config;
pub mod error;
pub mod etf;
pub mod extractor;
pub mod io;
pub mod linalg;
pub mod oracle;
pub mod runner;
pub mod solvers;

pub use error::{Error, Result, SolverError};
