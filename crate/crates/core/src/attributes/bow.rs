use serde::{Deserialize, Serialize};

use super::AttrError;
use crate::textmodel::Vocab;

/// Reported in place of `-inf` when the bag has no probability mass.
pub const LARGE_NEGATIVE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BowSource {
    Lda,
    Manual,
}

/// Topic keywords resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowAttribute {
    pub topic: usize,
    pub words: Vec<String>,
    pub ids: Vec<usize>,
    pub source: BowSource,
    /// Keywords dropped because the vocabulary lacks them.
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BowScore {
    pub log_prob: f64,
    /// True when the bag mass was zero and `log_prob` is [`LARGE_NEGATIVE`].
    pub sentinel: bool,
}

impl BowAttribute {
    pub fn new<S: AsRef<str>>(topic: usize, words: &[S], vocab: &Vocab, source: BowSource) -> Result<Self, AttrError> {
        let mut kept = Vec::new();
        let mut ids = Vec::new();
        let mut dropped = 0;
        for w in words {
            let w = w.as_ref().trim();
            if w.is_empty() {
                continue;
            }
            match vocab.id(w) {
                Some(id) if !ids.contains(&id) => {
                    ids.push(id);
                    kept.push(w.to_string());
                }
                Some(_) => {}
                None => dropped += 1,
            }
        }
        if ids.is_empty() {
            return Err(AttrError::EmptyBag);
        }
        if dropped > 0 {
            log::warn!("topic {topic}: {dropped} keywords not in vocabulary");
        }
        Ok(BowAttribute { topic, words: kept, ids, source, dropped })
    }

    /// Parse a manual keyword list, one word per line (`#` starts a comment).
    pub fn from_list(topic: usize, text: &str, vocab: &Vocab) -> Result<Self, AttrError> {
        let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        Self::new(topic, &words, vocab, BowSource::Manual)
    }

    /// `log Σ_{w∈bag} dist[w]` and its gradient with respect to `dist`.
    pub fn log_prob(&self, dist: &[f64]) -> Result<(BowScore, Vec<f64>), AttrError> {
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 || dist.iter().any(|&p| !(p >= 0.0)) {
            return Err(AttrError::NotADistribution(total));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= dist.len()) {
            return Err(AttrError::DimensionMismatch { expected: bad + 1, found: dist.len() });
        }
        let mass: f64 = self.ids.iter().map(|&i| dist[i]).sum();
        let mut grad = vec![0.0; dist.len()];
        if mass <= 0.0 {
            return Ok((BowScore { log_prob: LARGE_NEGATIVE, sentinel: true }, grad));
        }
        for &i in &self.ids {
            grad[i] = 1.0 / mass;
        }
        // summation rounding: a bag holding all the mass scores exactly 0
        let log_prob = if mass >= 1.0 - 1e-12 { 0.0 } else { mass.ln() };
        Ok((BowScore { log_prob, sentinel: false }, grad))
    }
}

/// Convenience wrapper matching the operation name.
pub fn bow_log_prob(bow: &BowAttribute, dist: &[f64]) -> Result<(BowScore, Vec<f64>), AttrError> {
    bow.log_prob(dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocab {
        Vocab::from_words((0..n).map(|i| format!("w{i}")))
    }

    #[test]
    fn whole_vocab_bag_is_zero() {
        let v = vocab(6);
        let words: Vec<&str> = v.tokens().iter().map(String::as_str).collect();
        let bow = BowAttribute::new(0, &words, &v, BowSource::Manual).unwrap();
        let dist = vec![0.1; 10];
        assert_eq!(bow.log_prob(&dist).unwrap().0.log_prob, 0.0);
    }

    #[test]
    fn uniform_tenth() {
        let v = vocab(96);
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let bow = BowAttribute::new(0, &words, &v, BowSource::Manual).unwrap();
        let (s, g) = bow.log_prob(&vec![0.01; 100]).unwrap();
        assert!((s.log_prob - 0.1f64.ln()).abs() < 1e-12);
        assert!((g[bow.ids[0]] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_mass_sentinel() {
        let v = vocab(2);
        let bow = BowAttribute::new(0, &["w0"], &v, BowSource::Manual).unwrap();
        let mut dist = vec![0.0; 6];
        dist[5] = 1.0;
        let (s, _) = bow.log_prob(&dist).unwrap();
        assert!(s.sentinel);
        assert_eq!(s.log_prob, LARGE_NEGATIVE);
    }

    #[test]
    fn drops_unknown_and_rejects_empty() {
        let v = vocab(2);
        let bow = BowAttribute::from_list(3, "# topic\nw0\nnope\n\nw1\nw0\n", &v).unwrap();
        assert_eq!(bow.words, ["w0", "w1"]);
        assert_eq!(bow.dropped, 1);
        assert!(matches!(BowAttribute::new(0, &["zz"], &v, BowSource::Lda), Err(AttrError::EmptyBag)));
        assert!(matches!(bow.log_prob(&[0.5; 6]), Err(AttrError::NotADistribution(_))));
    }
}
