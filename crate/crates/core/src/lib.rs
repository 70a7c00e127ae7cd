//! Rootlet-driven registration of spinal cord images to a straight-cord
//! template, with the disc-driven baseline, warp algebra, validation metrics
//! and a synthetic phantom generator.

pub mod bspline;
pub mod centerline;
pub mod cohort;
pub mod error;
pub mod io_util;
pub mod landmarks;
pub mod level_align;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod qc;
pub mod si_refine;
pub mod volume;
pub mod warpfield;
pub mod xy_scale;

pub use error::{Error, Result};
pub use volume::{Grid, Image, LabelMap, Volume};
