//! Progressive masked-feature distillation for knowledge graph completion.
//!
//! The crate trains a small transformer bi-encoder on (head, relation) → tail
//! prediction over textual entity descriptions, then compresses it into a
//! sequence of shallower students. Each student learns from three signals:
//! the true-label cross entropy over cosine scores, a score-matrix match
//! against its teacher, and a masked-feature match at positions hidden from
//! both models. Evaluation uses the filtered entity-ranking protocol.

pub mod distill;
pub mod encoder;
pub mod eval;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;
pub mod text;

pub use kg::{KnowledgeGraph, Triple};
pub use model::BiEncoder;
