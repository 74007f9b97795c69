//! Automatic vehicle labeling from attention maps, desk-scale.
//!
//! The crate covers everything downstream of a text-to-image generator:
//! attention-map math, decision-circle evaluation geometry, rotated tile
//! sampling, a pluggable blob detector, classifier-based label refinement,
//! location-based AP50, and an orchestrator that runs the three-stage
//! pseudo-labeling pipeline on procedurally generated scenes.

pub mod attn;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod manifest;
pub mod pipeline;
pub mod refine;
pub mod raster;
pub mod sampler;
pub mod scenegen;
pub mod store;

pub use error::{Error, Result};
pub use manifest::{Annotation, DatasetManifest, Domain, ManifestEntry, Stage};
pub use raster::Raster;
