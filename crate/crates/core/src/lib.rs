//! Histopathology images to entity graphs, graph neural networks on them,
//! and node-level explanations of their predictions.
//!
//! The preprocessing chain is [`stain`] normalization, [`tissue_mask`]
//! detection, [`nuclei`] and [`superpixel`] entity detection, [`features`]
//! and [`graph_build`]. [`gnn`] trains GIN/PNA models on the resulting
//! graphs and [`explain`] attributes predictions to nodes. [`pipeline`]
//! chains the steps with on-disk caching and hosts the runtime benchmark.

pub mod error;
pub mod explain;
pub mod features;
pub mod gnn;
pub mod graph_build;
pub mod nuclei;
pub mod pipeline;
pub mod raster;
pub mod stain;
pub mod stats;
pub mod superpixel;
pub mod synth;
pub mod tissue_mask;

pub use error::{Error, Result};
pub use raster::{EntityTable, GrayImage, Image, LabelMap};
