#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Super-diffusion salient object detection.
//!
//! The pipeline segments an image into superpixels, builds a close-loop
//! two-hop graph per (color space, scale) setting, spectrally refines each
//! random-walk diffusion operator, diffuses a bank of seed vectors through
//! every refined operator, and combines the resulting saliency columns with
//! a weight vector learned in closed form.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod refine;
pub mod seeds;
pub mod spectral;
pub mod superpixel;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
