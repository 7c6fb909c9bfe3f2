//! Category-aware data selection for instruction-tuning corpora.
//!
//! The pipeline classifies every turn into one of seven task categories,
//! scores turns for difficulty and category-specific response quality,
//! folds those into a per-conversation preference score and finally draws a
//! fixed-size subset with per-category quotas and k-means cluster
//! representatives.
//!
//! Every model-backed judgment goes through [`gateway::Gateway`], so the
//! algorithms here never depend on a particular model. The bundled
//! [`gateway::mock::MockScorer`] makes whole-pipeline runs deterministic.

pub mod classifier;
pub mod cluster;
pub mod corpus;
pub mod difficulty;
pub mod error;
pub mod gateway;
pub mod io;
pub mod pipeline;
pub mod preference;
pub mod quality;
pub mod sampler;
pub mod synthetic;

pub use classifier::{CategoryLabel, ConversationPolicy};
pub use corpus::{Conversation, Role, Turn};
pub use error::{Error, Result};
