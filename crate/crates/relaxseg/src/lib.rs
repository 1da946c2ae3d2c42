//! Filesystem side of the missing-modality segmentation pipeline: sample
//! containers and manifests, checkpoints, stage orchestration, evaluation
//! reports, ablation grids and the `relaxseg` command line.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use relaxseg_core as core;
