//! Text-conditioned object detection: a region proposal network whose
//! proposals are scored against a natural-language query by a learned
//! alignment head, trained end to end on synthetic shape scenes.

pub mod alignment;
pub mod backbone;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod nn;
pub mod proposal_encoder;
pub mod rpn;
pub mod service;
pub mod shapegen;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;

pub use error::{Error, Result};
