//! Scored candidate generation, shared by the HTTP handlers and the CLI.

use cuegen_core::attributes::{text_features, BowAttribute, BowSource, LinearHead, TopicModel};
use cuegen_core::corpus::collapse_whitespace;
use cuegen_core::steering::{generate_steered_ids, AttributeModel, AttributeTarget, SteerError, SteeringParams, StepTrace};
use cuegen_core::textmodel::{token_distribution, Checkpoint, BOS};
use serde::{Deserialize, Serialize};

/// Exactly one of the fields must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttributeKind {
    SentenceType(String),
    Topic(usize),
    Emotion(String),
}

impl AttributeSpec {
    pub fn kind(&self) -> Result<AttributeKind, String> {
        match (&self.sentence_type, self.topic, &self.emotion) {
            (Some(s), None, None) => match s.as_str() {
                "cue" | "dialogue" => Ok(AttributeKind::SentenceType(s.clone())),
                other => Err(format!("sentence_type must be cue or dialogue, got {other:?}")),
            },
            (None, Some(k), None) => Ok(AttributeKind::Topic(k)),
            (None, None, Some(e)) => Ok(AttributeKind::Emotion(e.to_lowercase())),
            (None, None, None) => Err("no attribute given".into()),
            _ => Err("exactly one of sentence_type, topic, emotion must be given".into()),
        }
    }

    /// Parse the CLI form `cue|dialogue|topic:<k>|emotion:<label>`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let spec = match s.split_once(':') {
            None => AttributeSpec { sentence_type: Some(s.to_string()), ..Default::default() },
            Some(("topic", k)) => {
                let k = k.parse().map_err(|_| format!("bad topic index {k:?}"))?;
                AttributeSpec { topic: Some(k), ..Default::default() }
            }
            Some(("emotion", e)) => AttributeSpec { emotion: Some(e.to_string()), ..Default::default() },
            Some((other, _)) => return Err(format!("unknown attribute kind {other:?}")),
        };
        spec.kind()?;
        Ok(spec)
    }
}

/// An attribute model resolved against the loaded artifacts.
#[derive(Debug, Clone)]
pub struct ResolvedAttribute {
    pub label: String,
    pub model: AttributeModel,
    pub class: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ResolveError {
    /// The spec itself is wrong (unknown label, topic out of range).
    #[error("{0}")]
    Invalid(String),
    /// The spec is fine but the model it needs is not loaded.
    #[error("{0}")]
    NotLoaded(String),
}

/// Topic keywords per bag.
pub const TOPIC_WORDS: usize = 50;

pub fn resolve_attribute(
    spec: &AttributeSpec,
    ck: &Checkpoint<f32>,
    cue_head: Option<&LinearHead>,
    emotion_head: Option<&LinearHead>,
    lda: Option<&TopicModel>,
) -> Result<ResolvedAttribute, ResolveError> {
    let head_class = |head: Option<&LinearHead>, what: &str, class: &str| {
        let head = head.ok_or_else(|| ResolveError::NotLoaded(format!("no {what} model loaded")))?;
        let idx = head
            .class_index(class)
            .ok_or_else(|| ResolveError::Invalid(format!("{what} model has no class {class:?}")))?;
        Ok(ResolvedAttribute { label: format!("{what}:{class}"), model: AttributeModel::Head(head.clone()), class: idx })
    };
    match spec.kind().map_err(ResolveError::Invalid)? {
        AttributeKind::SentenceType(c) => head_class(cue_head, "sentence_type", &c),
        AttributeKind::Emotion(e) => head_class(emotion_head, "emotion", &e),
        AttributeKind::Topic(k) => {
            let lda = lda.ok_or_else(|| ResolveError::NotLoaded("no topic model loaded".into()))?;
            let words = lda.top_words(k, TOPIC_WORDS).map_err(|e| ResolveError::Invalid(e.to_string()))?;
            let words: Vec<&str> = words.iter().map(|(w, _)| w.as_str()).collect();
            let bow = BowAttribute::new(k, &words, &ck.vocab, BowSource::Lda)
                .map_err(|e| ResolveError::Invalid(format!("topic {k}: {e}")))?;
            Ok(ResolvedAttribute { label: format!("topic:{k}"), model: AttributeModel::Bow(bow), class: 0 })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub mean_loss_before: f64,
    pub mean_loss_after: f64,
    pub fallbacks: usize,
}

impl TraceSummary {
    fn of(trace: &StepTrace) -> Self {
        let n = trace.len().max(1) as f64;
        TraceSummary {
            steps: trace.len(),
            mean_loss_before: trace.steps.iter().map(|s| s.loss_before).sum::<f64>() / n,
            mean_loss_after: trace.steps.iter().map(|s| s.loss_after).sum::<f64>() / n,
            fallbacks: trace.steps.iter().filter(|s| s.fallback).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generation order; candidate `i` was sampled with seed `params.seed + i`.
    pub index: usize,
    pub seed: u64,
    pub text: String,
    /// The text as it would be inserted into a script.
    pub cue_text: String,
    pub attribute_log_likelihood: f64,
    pub mean_kl: f64,
    /// `None` when nothing was generated.
    pub perplexity: Option<f64>,
    pub trace: TraceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsteeredComparison {
    pub texts: Vec<String>,
    pub attribute_log_likelihoods: Vec<f64>,
    pub mean_attribute_log_likelihood: f64,
    pub best_attribute_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub attribute: String,
    pub prefix_tokens: usize,
    /// Sorted by attribute log-likelihood, best first.
    pub candidates: Vec<Candidate>,
    pub unsteered: Option<UnsteeredComparison>,
}

/// `[BOS] + tail of prefix`, leaving room for `max_len` generated tokens.
pub fn prefix_ids(ck: &Checkpoint<f32>, prefix: &str, max_len: usize) -> Vec<usize> {
    let budget = ck.model.config.context.saturating_sub(max_len).max(2) - 1;
    let ids = ck.vocab.encode(prefix);
    let mut out = vec![BOS];
    out.extend_from_slice(&ids[ids.len().saturating_sub(budget)..]);
    out
}

/// Log-likelihood of a generated continuation under the attribute model.
/// Heads score pooled features of the continuation; bags score the mean
/// per-step log bag mass along it.
pub fn attribute_log_likelihood(
    ck: &Checkpoint<f32>,
    attr: &ResolvedAttribute,
    prefix: &[usize],
    tokens: &[usize],
) -> Result<f64, SteerError> {
    match &attr.model {
        AttributeModel::Head(h) => {
            let x = text_features(&ck.model, &ck.vocab, &ck.vocab.decode(tokens))?;
            Ok(h.log_probs(&x)?[attr.class])
        }
        AttributeModel::Bow(b) => {
            let mut seq = prefix.to_vec();
            seq.extend_from_slice(tokens);
            // the step that produced tokens[0] reads from the last prefix
            // position; an empty continuation is scored on that step alone
            let upto = if tokens.is_empty() { seq.len() } else { seq.len() - 1 };
            let (logits, _, _) = ck.model.forward_full(&seq[..upto], None)?;
            let from = prefix.len() - 1;
            let rows = (from..logits.rows).collect::<Vec<_>>();
            let mut total = 0.0;
            for &r in &rows {
                total += b.log_prob(&token_distribution(logits.row(r), 1.0))?.0.log_prob;
            }
            Ok(total / rows.len() as f64)
        }
    }
}

fn perplexity(ck: &Checkpoint<f32>, prefix: &[usize], tokens: &[usize]) -> Result<Option<f64>, SteerError> {
    if tokens.is_empty() {
        return Ok(None);
    }
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(tokens);
    let (nll, n) = ck.model.nll(&seq, prefix.len())?;
    Ok(Some((nll / n as f64).exp()))
}

/// First parenthesized span of `text` if there is one, else the whole text,
/// with tokenizer spacing undone and wrapped in parentheses.
pub fn cue_text(text: &str) -> String {
    let body = match (text.find('('), text.find(')')) {
        (Some(a), Some(b)) if a < b => &text[a + 1..b],
        _ => text,
    };
    let body: String = body.chars().filter(|&c| c != '(' && c != ')').collect();
    let mut out = collapse_whitespace(&body).trim().to_string();
    for p in [" .", " ,", " !", " ?", " ;", " :"] {
        out = out.replace(p, &p[1..]);
    }
    format!("({out})")
}

/// Generate `n` steered candidates (seeds `params.seed..params.seed + n`),
/// score them and sort best first. With `compare` the same seeds are also
/// sampled unsteered and scored for reference.
pub fn generate_candidates(
    ck: &Checkpoint<f32>,
    attr: &ResolvedAttribute,
    prefix: &[usize],
    params: &SteeringParams,
    n: usize,
    compare: bool,
) -> Result<Generation, SteerError> {
    let target = AttributeTarget { model: &attr.model, class: attr.class };
    let mut candidates = Vec::with_capacity(n);
    let mut plain = Vec::new();
    for i in 0..n {
        let p = SteeringParams { seed: params.seed.wrapping_add(i as u64), ..*params };
        let (tokens, trace) = generate_steered_ids(&ck.model, prefix, target, &p)?;
        let text = ck.vocab.decode(&tokens);
        candidates.push(Candidate {
            index: i,
            seed: p.seed,
            cue_text: cue_text(&text),
            text,
            attribute_log_likelihood: attribute_log_likelihood(ck, attr, prefix, &tokens)?,
            mean_kl: trace.mean_kl(),
            perplexity: perplexity(ck, prefix, &tokens)?,
            trace: TraceSummary::of(&trace),
        });
        if compare {
            let (tokens, _) = generate_steered_ids(&ck.model, prefix, target, &SteeringParams { alpha: 0.0, ..p })?;
            plain.push((ck.vocab.decode(&tokens), attribute_log_likelihood(ck, attr, prefix, &tokens)?));
        }
    }
    candidates.sort_by(|a, b| b.attribute_log_likelihood.total_cmp(&a.attribute_log_likelihood));
    let unsteered = compare.then(|| {
        let lls: Vec<f64> = plain.iter().map(|(_, l)| *l).collect();
        UnsteeredComparison {
            texts: plain.into_iter().map(|(t, _)| t).collect(),
            mean_attribute_log_likelihood: lls.iter().sum::<f64>() / lls.len().max(1) as f64,
            best_attribute_log_likelihood: lls.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            attribute_log_likelihoods: lls,
        }
    });
    Ok(Generation { attribute: attr.label.clone(), prefix_tokens: prefix.len(), candidates, unsteered })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_spec_forms() {
        assert_eq!(AttributeSpec::parse("cue").unwrap().kind().unwrap(), AttributeKind::SentenceType("cue".into()));
        assert_eq!(AttributeSpec::parse("topic:3").unwrap().kind().unwrap(), AttributeKind::Topic(3));
        assert_eq!(AttributeSpec::parse("emotion:Joy").unwrap().kind().unwrap(), AttributeKind::Emotion("joy".into()));
        assert!(AttributeSpec::parse("monologue").is_err());
        assert!(AttributeSpec::parse("topic:x").is_err());
        assert!(AttributeSpec::parse("mood:calm").is_err());
        let two = AttributeSpec { sentence_type: Some("cue".into()), topic: Some(1), emotion: None };
        assert!(two.kind().is_err());
        assert!(AttributeSpec::default().kind().is_err());
    }

    #[test]
    fn cue_text_extracts_and_wraps() {
        assert_eq!(cue_text("( ANNA sits down . ) BEN . I want"), "(ANNA sits down.)");
        assert_eq!(cue_text("I want the truth ."), "(I want the truth.)");
        assert_eq!(cue_text(""), "()");
    }
}
