//! Offline-teacher prototype distillation toolkit on cached embeddings.
//!
//! The pipeline: flag LLM-generated class captions with a token/length rule
//! engine, aggregate them into visually-verified textual prototypes with
//! median/MAD pruning, train a desk-scale prompt-tuned student under a
//! tri-aspect alignment objective, and evaluate with classification and
//! frozen-gallery retrieval protocols. Closed-form prompt parameter and
//! FLOPs-overhead calculators are cross-checked against the toy encoder's
//! multiply-add counter.

pub mod distill;
pub mod error;
pub mod math;
pub mod prototype;
pub mod rsflag;
pub mod student;

pub use error::{Error, Result};
