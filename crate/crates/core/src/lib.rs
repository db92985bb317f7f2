pub mod causal_graph;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gat;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod synthdata;
pub mod tca;

pub use error::{Error, Result};
