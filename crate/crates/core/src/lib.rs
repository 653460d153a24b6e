//! Deterministic query-selector sparse attention and everything needed to
//! train and evaluate a small encoder-decoder forecaster built on it:
//! dense f64 matrices with a reverse-mode tape, full and sparse attention
//! kernels, the transformer model, time-series data handling, the training
//! and sweep harness, a kernel micro-benchmark, and an event-log
//! next-activity classifier.

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod eventlog;
pub mod matrix;
pub mod model;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tape::{Gradients, NodeId, Tape};
