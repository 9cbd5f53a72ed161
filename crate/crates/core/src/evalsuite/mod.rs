//! String similarity and diversity metrics, nearest-reference search and
//! the generation evaluation harness.

mod metrics;
mod report;
mod search;

pub use metrics::{bi_sim, dist_n, lcsr, levenshtein, levenshtein_bounded, DistNorm};
pub use report::{
    normalize_for_eval, run_eval, sample_references, EvalConfig, EvalReport, RuntimeStats, SampleResult,
    ScoredNeighbor,
};
pub use search::{nearest_cues, nearest_cues_naive, Neighbor, ReferenceIndex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("both strings are empty")]
    BothEmpty,
    #[error("no sequence is long enough to form an n-gram")]
    NoNgrams,
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("generator failed: {0}")]
    Generator(String),
}

impl EvalError {
    pub fn name(&self) -> &'static str {
        match self {
            EvalError::BothEmpty => "BothEmpty",
            EvalError::NoNgrams => "NoNgrams",
            EvalError::EmptyReferences => "EmptyReferences",
            EvalError::InvalidConfig(_) => "InvalidConfig",
            EvalError::Generator(_) => "GeneratorFailed",
        }
    }
}
