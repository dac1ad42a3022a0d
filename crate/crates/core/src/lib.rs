//! Point-supervised nuclei instance segmentation.
//!
//! The pipeline turns point annotations into partial semantic labels, trains
//! a per-pixel foreground classifier on them, derives instance pseudo-labels
//! from its output, trains a per-pixel embedder with a discriminative loss,
//! and groups foreground embeddings with mean-shift at inference time.

pub mod config;
pub mod embednet;
pub mod error;
pub mod geometry;
pub mod grouping;
pub mod io;
pub mod kdtree;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pseudolabel;
pub mod raster;
pub mod synth;
pub mod train;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use raster::{
    DistanceMap, EmbeddingField, Grid, InstanceLabelMap, Mask, Point, PointSet, ProbabilityMap,
    RasterImage, RegionMap, SemanticLabel, SemanticLabelMap,
};
