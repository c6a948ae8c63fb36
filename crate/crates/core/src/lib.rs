//! Graph pre-training with task and position prompts.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretext;
pub mod prompt;
pub mod reach;
pub mod rng;
pub mod sparse;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use graph::Graph;
