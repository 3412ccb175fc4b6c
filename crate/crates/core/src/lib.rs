pub mod cluster;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod semantics;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
