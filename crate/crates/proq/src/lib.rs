//! File formats, pipeline stages and the `proq` command line on top of
//! `proq-core`.

pub mod artifacts;
pub mod cdm_csv;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod pipeline;
pub mod stages;
