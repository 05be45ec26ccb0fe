//! Background-centric point-prompt generation for one-shot segmentation.

pub mod autodiff;
pub mod backend;
pub mod baselines;
pub mod bcm;
pub mod bppc;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod overlay;
pub mod params;
pub mod raster;
pub mod spr;
pub mod train;
