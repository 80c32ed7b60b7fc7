//! Tile-wise whole-slide image classification for Gleason grading.
//!
//! The crate covers the full slide workflow:
//!
//! 1. **wsi_io** – open tiled/strip TIFF (or PNG) slides, enumerate the tile
//!    grid, read padded tiles and write deterministic tiled pyramidal TIFFs.
//! 2. **annotation** – parse GeoJSON ROI polygons and compute exact per-class
//!    tile coverage by rectangle clipping and shoelace area.
//! 3. **dataset** – coverage → label thresholds, questionable filtering,
//!    stratified splits, class balancing and the tile manifest.
//! 4. **preprocess** – resize, Reinhard stain normalization in lαβ space,
//!    z-score normalization and training augmentations.
//! 5. **inference** – pluggable 6-class classifier backends (lookup table,
//!    ONNX model file, remote HTTP service).
//! 6. **overlay** – per-tile heatmap tinting and WSI reconstruction.
//! 7. **metrics** – confusion matrix, one-vs-rest metrics, AUC, macro
//!    averages, binary tasks and focal loss.
//! 8. **pipeline** – the `prepare`, `predict` and `evaluate` workflows.

pub mod annotation;
pub mod dataset;
pub mod exec;
pub mod inference;
pub mod metrics;
pub mod overlay;
pub mod pipeline;
pub mod preprocess;
pub mod wsi_io;

pub use annotation::{AnnotationSet, CoverageVector, GleasonClass, RoiPolygon};
pub use dataset::{LabeledTile, Split};
pub use inference::{ClassProbabilities, Prediction};
pub use wsi_io::{Slide, Tile, TileCoord, TileGrid};
