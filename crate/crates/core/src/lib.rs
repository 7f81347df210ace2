//! Windowing, batching, sequence models and evaluation for inpatient
//! deterioration prediction from irregular EHR time series.

pub mod batching;
pub mod error;
pub mod ingest;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod seqnet;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
