//! Command-line front end: run configuration, stage orchestration and
//! report emission.

pub mod config;
pub mod pipeline;
pub mod svg;
