//! Human review service for held-out preference samples.
//!
//! Evaluators browse samples with their media, submit one of four labels, and
//! the service aggregates consensus labels per task format. Every label is
//! appended to a log that is replayed on startup.

pub mod labels;
pub mod service;

pub use labels::{consensus, LabelCounts, LabelLog, LabelPercents, ReviewAggregate, ReviewLabel, ReviewRecord};
pub use service::{router, serve, ExportSummary, ReviewConfig, ReviewError, ReviewState, SamplePage};
