//! Cross-contrast MRI synthesis and tissue segmentation on thigh phantoms.
//!
//! The crate generates multi-contrast phantoms, preprocesses them, trains
//! pix2pix-style translators between contrasts, trains U-Net segmentors on
//! real, synthesized or mixed inputs, and runs the full cross-validated
//! experiment matrix with resumable, byte-reproducible reports.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod report;
pub mod seed;
pub mod segmentation;
pub mod synthesis;

pub use error::{Error, Result};
