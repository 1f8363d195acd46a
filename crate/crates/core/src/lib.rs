//! Open-world query-based object detection at desk scale.
//!
//! A toy set-prediction detector is trained with two Hungarian matchers (the
//! usual class-specific one and a class-agnostic objectness one), then
//! fine-tuned with pseudo labels for unknown objects drawn from its own
//! objectness head and from selective-search proposals, exchanged between two
//! augmented views of each image. New classes are absorbed incrementally with
//! feature/classification distillation and exemplar replay, and the result is
//! scored with the open-world metric suite (known mAP@0.5, U-Recall,
//! Wilderness Impact, A-OSE).

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod pseudo_label;
pub mod runner;
pub mod selective_search;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use geometry::{BoxCxcywh, BoxXyxy};
pub use tensor::Tensor;
