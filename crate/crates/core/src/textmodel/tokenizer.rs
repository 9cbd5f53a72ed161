use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::corpus::tokens;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

/// Word-level vocabulary. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Build from the non-special entries, in id order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Preprocess and map to ids; unknown words become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokens(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Join tokens with spaces, skipping BOS/EOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Word-level vocabulary of the `max_vocab` most frequent tokens.
///
/// Ties are broken lexicographically, so the result depends only on the
/// multiset of tokens.
pub fn train_tokenizer<'a, I>(texts: I, max_vocab: usize) -> Result<Vocab, ModelError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for t in tokens(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    for s in SPECIALS {
        counts.remove(s);
    }
    if counts.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab);
    Ok(Vocab::from_words(ranked.into_iter().map(|(w, _)| w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = train_tokenizer(["a a b"], 10).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(4));
    }

    #[test]
    fn single_token_and_ties() {
        let v = train_tokenizer(["x"], 10).unwrap();
        assert_eq!(v.tokens()[4..], ["x".to_string()]);
        let v = train_tokenizer(["b a"], 10).unwrap();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
    }

    #[test]
    fn truncation_and_unknowns() {
        let v = train_tokenizer(["c c c b b a"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode("a b c."), vec![UNK, 5, 4, UNK]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS]), "c b");
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(train_tokenizer(["  "], 10), Err(ModelError::EmptyCorpus)));
        assert!(matches!(train_tokenizer(std::iter::empty(), 10), Err(ModelError::EmptyCorpus)));
    }

    #[test]
    fn serde_as_token_list() {
        let v = train_tokenizer(["x y"], 10).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with(r#"["<bos>","<eos>","<unk>","<pad>""#));
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
