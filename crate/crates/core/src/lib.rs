//! Location embeddings learned from mobility trajectories.
//!
//! The pipeline discretizes GPS points into Hilbert-ordered grid cells,
//! cuts each user's records into trajectories, builds a flow graph of
//! consecutive visits and a spatial graph of nearby cells, and trains a
//! skip-gram model whose node and context vectors are graph convolutions
//! of free base vectors over both graphs.

pub mod cli;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geo;
pub mod graph;
pub mod manifest;
pub mod matrix;
pub mod model;
pub mod synth;
pub mod trajectory;

pub use embedding::EmbeddingMatrix;
pub use error::{Error, Result};
pub use exec::Exec;
pub use geo::{CellId, GeoPoint};
