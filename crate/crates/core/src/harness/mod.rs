//! The experiment matrix: configuration, job expansion, the resumable
//! pipeline that runs synthesis, segmentation and evaluation per fold, and
//! the fold-hygiene audit.

mod audit;
mod config;
mod matrix;
mod pipeline;

pub use audit::{audit_access, AuditReport};
pub use config::{Config, DatasetConfig, MatrixConfig, WORKERS_ENV};
pub use matrix::{expand_experiment_matrix, ChannelSource, ChannelSpec, ExperimentSpec, InputMode};
pub use pipeline::{
    compare_single_input, read_json, write_json_atomic, JobFailure, MatrixOutcome, Pipeline, SegmentationRecord, SynthesisRecord,
    TissueComparison,
};
