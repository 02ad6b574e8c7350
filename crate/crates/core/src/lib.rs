//! Training-free nuclear instance segmentation for H&E images.
//!
//! The crate is `no_std` (with `alloc`) and does no IO. It covers the whole
//! path from an RGB raster to a labelled instance map:
//!
//! 1. [`stain`]: optical density, colour deconvolution and the
//!    high-confidence foreground/background masks.
//! 2. [`features`]: stitched dense feature grids from a pluggable
//!    [`features::FeatureProvider`] and K-means class prototypes.
//! 3. [`ot`]: generalized scaling (Sinkhorn) solvers, the slack-column
//!    partial transport solver and the progressive ρ scan.
//! 4. [`prompting`]: activation maps, binarization and point prompts.
//! 5. [`predictor`]: the patch-level promptable mask predictor contract.
//! 6. [`postprocess`]: unified scoring and containment-aware soft NMS.
//! 7. [`metrics`]: Dice, AJI, DQ, SQ and PQ.
//!
//! [`pipeline`] strings the stages together. File formats, the CLI and the
//! synthetic fixtures live in the `nucseg` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod features;
pub mod grid;
pub(crate) mod math;
pub mod metrics;
pub mod morphology;
pub mod ot;
pub mod pipeline;
pub mod postprocess;
pub mod predictor;
pub mod prompting;
pub mod stain;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid, RasterImage};
