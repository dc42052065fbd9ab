//! Dense entity retrieval with multi-view distillation.
//!
//! Entities are split into a global view and per-sentence local views; a
//! two-tower student learns from a joint-feature teacher through view-level
//! and entity-level score distillation, and retrieval runs over a
//! pre-computed view-embedding index with max-pool entity scoring.

pub mod config;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod numeric;
pub mod scoring;
pub mod segment;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use corpus::{CandidateSet, EntityRecord, MentionRecord, SynthSpec};
pub use distill::{Distribution, LossBreakdown, LossWeights};
pub use encoder::{Embedding, EncoderConfig, JointModel, Student, Teacher};
pub use error::{MvdError, Result};
pub use eval::{AblationToggle, EvalReport};
pub use index::{IndexConfig, SearchResult, ViewIndex};
pub use scoring::ScoreMatrix;
pub use segment::{SegmentationConfig, TokenSeq, ViewSet};
pub use tensor::ParamStore;
pub use train::{RefreshInterval, Stage, TrainConfig};
