//! Core algorithms for turning OMOP-shaped EHR tables into patient token
//! sequences and training a small transformer encoder on them.
//!
//! The crate is `no_std` with `alloc`. File formats, the CLI and anything
//! touching the filesystem or the clock live in the `proq` companion crate.

#![no_std]

extern crate alloc;

pub mod cdm;
pub mod cohort;
pub mod concepts;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod outcome;
pub mod quantizer;
pub mod rng;
pub mod sequencer;
pub mod synth;
pub mod training;

pub use cdm::{Dataset, Domain, EventRecord, Gender, PersonRecord, VisitRecord, VisitType};
pub use cohort::{CohortConfig, CohortMember, InclusionReason};
pub use metrics::MetricReport;
pub use model::{ModelConfig, ModelParams, Objective};
pub use outcome::{Label, LabeledExample, TaskSpec};
pub use quantizer::QuantileMap;
pub use sequencer::{Token, TokenSequence, Vocabulary};

/// Calendar timestamps at second precision in one uniform timezone.
pub type DateTime = chrono::NaiveDateTime;
/// Calendar dates.
pub type Date = chrono::NaiveDate;

pub type PersonId = i64;
pub type VisitId = i64;
pub type EventId = i64;
pub type ConceptId = i64;
