pub mod brownian;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod parallel;
pub mod rbf;

pub use error::{Result, RvaeError};
pub use linalg::{DenseMatrix, DenseVector};
