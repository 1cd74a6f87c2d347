//! Radiotherapy plan evaluation: protocol-normalized scoring, percentile
//! ranking, retrieval-based percentile prediction, constraint checking,
//! retrieval hyperparameter tuning and tool-augmented summary sessions.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod embedding;
pub mod error;
pub mod gp;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod retrieval;
pub mod scoring;
pub mod seeding;
pub mod synth;
pub mod tuner;

pub use constraints::check_constraints;
pub use embedding::{Embedder, EmbeddingVector, HashEmbedder, RemoteEmbedder};
pub use error::{Error, Result};
pub use kb::{build_kb, load_kb, save_kb, HeldOutPlan, IndexedKb, KnowledgeBase};
pub use metrics::{evaluate_system, EvaluationReport, LossBreakdown};
pub use model::{
    ConstraintSpec, KBEntry, MetricKind, MetricMap, PlanRecord, PredictionResult, ProtocolSpec,
    RetrievalConfig, ScoredNeighbor, Violation, ViolationReport,
};
pub use retrieval::predict;
pub use tuner::{tune_retrieval, TunerTrace};
