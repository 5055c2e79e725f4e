//! Toolkit for merging heterogeneous animal keypoint datasets into one
//! keypoint superset and training, decoding and scoring pose models on it.
//!
//! The modules follow the data path: [`dataset`] reads and validates
//! COCO-style keypoint files, [`merge`] projects them onto a shared
//! vocabulary, [`heatmap`] encodes and decodes Gaussian targets,
//! [`training`] fits a small linear predictor under masked supervision,
//! [`eval`] scores predictions with OKS-based mAP, and [`experiments`]
//! builds the data-ratio, sparse-keypoint and pseudo-label splits.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod heatmap;
pub mod merge;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use dataset::{
    parse_dataset, read_dataset, serialize_dataset, write_dataset, Annotation, BBox, ImageRecord, Keypoint,
    KeypointVocabulary, PoseDataset,
};
pub use error::{Error, Result};
pub use eval::{evaluate, heuristic_bbox, oks, EvalParams, EvalReport, SigmaConfig};
pub use heatmap::{decode_heatmaps, encode_targets, group_by_tags, HeatmapStack};
pub use merge::{build_superset, merge, merge_with_table, project_dataset, ConversionTable, MergeReport};
pub use training::{masked_mse, masked_mse_grad, train, ToyPredictor, TrainConfig};
