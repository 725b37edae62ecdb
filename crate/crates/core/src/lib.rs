//! Context-driven copy-paste augmentation for object detection datasets.
//!
//! The pipeline: build an [`bank::InstanceBank`] of segmented objects, turn
//! annotated images into masked contextual samples ([`context`]), train a
//! scorer that predicts which category belongs in a masked box
//! ([`scorer`], or an external one over [`bridge`]), then let
//! [`augment`] pick plausible boxes and [`blend`] instances into them.

pub mod augment;
pub mod bank;
pub mod blend;
pub mod bridge;
pub mod context;
pub mod dataset_io;
pub mod error;
pub mod geometry;
pub mod par;
pub mod raster;
pub mod scorer;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
