//! Predictive monitoring for business-process event logs: learns to predict
//! the next activity type and the time until the next event from raw
//! (case, activity, timestamp) records.
//!
//! The pipeline is: parse a log ([`eventlog`]), mine its directly-follows
//! graph ([`dfg`]), encode per-prefix feature matrices ([`features`]), train
//! one of five small neural model variants ([`models`], [`neuralnet`],
//! [`training`]) and score it overall and per process stage ([`evaluation`]).

pub mod checkpoint;
pub mod cli;
pub mod dfg;
pub mod error;
pub mod evaluation;
pub mod eventlog;
pub mod features;
pub mod models;
pub mod neuralnet;
pub mod training;

pub use error::{Error, Result};
