//! Attribute models `p(a|x)` over the frozen language model: linear heads on
//! pooled hidden states, bag-of-words topics and emotion labels.

mod bow;
mod emotion;
mod head;
mod lda;

pub use bow::{bow_log_prob, BowAttribute, BowScore, BowSource, LARGE_NEGATIVE};
pub use emotion::{import_emotion_labels, EmotionDataset, EmotionMap, PLUTCHIK};
pub use head::{text_features, train_head, HeadHyper, HeadMode, HeadReport, LabeledText, LinearHead};
pub use lda::{lda_fit, LdaParams, TopicModel};

use crate::container::ContainerError;
use crate::corpus::tokens;
use crate::textmodel::ModelError;

const STOPWORDS: &str = include_str!("../../data/stopwords.txt");

#[derive(Debug, thiserror::Error)]
pub enum AttrError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected dimension {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bag of words has no in-vocabulary words")]
    EmptyBag,
    #[error("input is not a probability distribution (sums to {0})")]
    NotADistribution(f64),
    #[error("{docs} documents is fewer than {k} topics")]
    TooFewDocs { docs: usize, k: usize },
    #[error("topic {topic} out of range for {k} topics")]
    TopicOutOfRange { topic: usize, k: usize },
    #[error("line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("bad attribute file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl AttrError {
    pub fn name(&self) -> &'static str {
        match self {
            AttrError::EmptyDataset => "EmptyDataset",
            AttrError::LabelOutOfRange { .. } => "LabelOutOfRange",
            AttrError::DimensionMismatch { .. } => "DimensionMismatch",
            AttrError::EmptyBag => "EmptyBag",
            AttrError::NotADistribution(_) => "NotADistribution",
            AttrError::TooFewDocs { .. } => "TooFewDocs",
            AttrError::TopicOutOfRange { .. } => "TopicOutOfRange",
            AttrError::MalformedRecord { .. } => "MalformedRecord",
            AttrError::InvalidParams(_) => "InvalidParams",
            AttrError::Format(_) | AttrError::Container(_) => "BadAttributeFile",
            AttrError::Model(e) => e.name(),
        }
    }
}

pub fn stopwords() -> impl Iterator<Item = &'static str> {
    STOPWORDS.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Lowercased word tokens of a cue for topic modelling: punctuation and
/// stopwords removed.
pub fn topic_tokens(text: &str) -> Vec<String> {
    let stop: std::collections::HashSet<&str> = stopwords().collect();
    tokens(text)
        .into_iter()
        .map(|t| t.to_lowercase())
        .filter(|t| t.chars().any(char::is_alphanumeric) && !stop.contains(t.as_str()))
        .collect()
}
