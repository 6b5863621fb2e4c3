//! Experiment harness for benchmarking GWP diffusion-tensor interpolation
//! against linear and log-Euclidean baselines.
//!
//! The harness owns everything around the model: experiment configs and
//! presets, the downsample-and-score protocol, metric tables, glyph
//! exports, and the reproducibility manifest. The `gwp-dti` binary is a
//! thin command-line layer over these modules.

pub mod config;
pub mod evaluate;
pub mod experiment;
pub mod glyphs;
