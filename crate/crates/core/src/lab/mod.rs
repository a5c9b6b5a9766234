//! Experiment harness: synthetic pools, feature and mask files, text
//! configuration, N-sweeps and reports.

pub mod config;
pub mod files;
pub mod fts;
pub mod pgm;
pub mod report;
pub mod sweep;
pub mod synth;
pub mod toy;
