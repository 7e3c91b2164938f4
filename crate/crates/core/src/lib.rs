//! Toolkit for object detection on low-light fisheye traffic imagery.
//!
//! The crate covers the non-neural half of a fisheye detection pipeline:
//! bounding-box geometry, ground-truth and detection file formats,
//! illumination statistics and night/other clustering, weighted box fusion
//! of per-model detections, mAP/F1 evaluation, and an orchestrator that
//! drives external enhancement / super-resolution / detector commands
//! through a directory-based adapter contract.

pub mod error;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod illumination;
pub mod manifest;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
pub use formats::{Annotation, ClassSchema, Detection, DetectionFormat, DimsTable};
pub use geometry::{BoundingBox, Convention, ImageDims};
