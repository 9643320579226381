//! Image tag completion via jointly learned convolutional max-pool
//! representations, a linear tag predictor, and a relaxed tag-assignment
//! matrix, optimized by alternating gradient descent over a kNN similarity
//! graph.

pub mod cli;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod gradients;
pub mod graph;
pub mod io;
pub mod objective;
pub mod optimizer;
pub mod tasks;

pub use error::{Error, Result};
