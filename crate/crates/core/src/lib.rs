//! Sacroiliac joint localization and sacroiliitis grading for pelvic CT.

pub mod case;
pub mod error;
pub mod eval;
pub mod forest;
pub mod grader;
pub mod image;
pub mod morphology;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod roi;
pub mod volume;

pub use error::{Error, Result, Stage};
pub use volume::{BinaryMask, CtVolume, Grid, VoxelIndex, WorldPoint};
