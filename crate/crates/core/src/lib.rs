//! Region-based multi-U-Net brain segmentation pipeline.
//!
//! The crate covers the full desk-scale workflow: NIfTI-1 I/O, fuzzy c-means
//! intensity normalization, region cropping and label fusion, a from-scratch
//! 3-D U-Net with reverse-mode autodiff, the two-phase training schedule, a
//! patch-tiling whole-volume baseline, and the evaluation stack (Dice, HD95,
//! Wilcoxon signed-rank, summary tables). Synthetic ellipsoid phantoms stand
//! in for clinical data so every stage is exercisable end to end.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod losses;
pub mod manifest;
pub mod nifti;
pub mod optim;
pub mod phantom;
pub mod metrics;
pub mod preprocess;
pub mod regions;
pub mod tiling;
pub mod train;
pub mod tensor;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelMap, Volume};
