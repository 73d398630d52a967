//! Semi-supervised video paragraph grounding via context consistency.
//!
//! The crate trains an encoder-decoder grounding network in two stages:
//! a mean-teacher stage where the student sees paragraphs with sentences
//! removed and learns a moment-level contrastive consistency loss from the
//! teacher, followed by retraining from scratch on pseudo labels whose
//! confidence is the agreement of predictions across pruned query contexts.
//!
//! Everything runs on synthetic desk-scale benchmarks in f64 with manual
//! backpropagation, so runs are deterministic and gradient-checkable.

pub mod augment;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod interval;
pub mod model;
pub mod pseudo;
pub mod stage1;
pub mod synthetic;
pub mod tensor;

pub use error::CclError;
pub use interval::{Interval, IntervalSet};
