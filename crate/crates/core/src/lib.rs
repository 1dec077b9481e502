//! Authorship-verification rationales: prompting, parsing, consistency
//! metrics, distillation filtering, evaluation and human annotation.

pub mod annotation;
pub mod corpus;
pub mod filter;
pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod prompt;

pub use metrics::Score;
pub use model::{
    BinLabel, ConsistencyVerdict, DocumentPair, EvalReport, FeatureAnalysis, FeatureKey,
    FinalScore, RationaleRecord, TrainingExample, TriLabel,
};
pub use parser::{parse_rationale, ParseFailure, ParseFailureKind};
pub use prompt::{build_prompt, PromptKind, RenderedPrompt};

/// Exact rational scores for oracle comparisons.
pub type ExactScore = num_rational::Ratio<u64>;
/// Floating scores used for reporting.
pub type FloatScore = f64;
