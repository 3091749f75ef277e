//! Semantic-concept-guided set prediction for diverse video captioning.
//!
//! Given per-frame feature vectors for a video, the pipeline predicts a set
//! of captions paired with concept-combination labels, trained with a
//! Hungarian-matching set loss and evaluated with relevance (BLEU@4,
//! ROUGE-L, CIDEr) and diversity (Div-n, m-BLEU, self-CIDEr) metrics.

pub mod corpus;
pub mod detector;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod setloss;
pub mod tape;

pub use error::{Error, Result};
