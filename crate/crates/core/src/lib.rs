//! Shopping product question identification.

pub mod error;
pub mod exec;
pub mod gat;
pub mod graph;
pub mod catalog;
pub mod embeddings;
pub mod moe;
pub mod numerics;
pub mod params;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
