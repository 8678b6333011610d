//! Depth-map encoding, per-object depth statistics, a depth query service,
//! QA dataset conversion, action tokenization and benchmark scoring.

pub mod action_codec;
pub mod bench_scorer;
pub mod depth_api;
pub mod depth_codec;
pub mod object_depth;
pub mod par;
pub mod qa_pipeline;
pub mod raster;
