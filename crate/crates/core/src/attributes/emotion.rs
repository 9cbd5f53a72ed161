use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AttrError, LabeledText};

pub const PLUTCHIK: [&str; 8] = ["joy", "trust", "fear", "surprise", "sadness", "disgust", "anger", "anticipation"];

const BUNDLED: &str = include_str!("../../data/emoji_plutchik.tsv");

/// Emoji → emotion label. Variation selectors are ignored on lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionMap {
    map: BTreeMap<String, usize>,
    labels: Vec<String>,
}

fn normalize(emoji: &str) -> String {
    emoji.trim().chars().filter(|&c| c != '\u{fe0f}' && c != '\u{fe0e}').collect()
}

impl EmotionMap {
    /// The bundled 64-emoji map onto the eight Plutchik primaries.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED, &PLUTCHIK).expect("bundled emotion map is valid")
    }

    /// Parse `emoji<TAB>label` lines; labels must come from `allowed`, which
    /// also fixes the label order.
    pub fn parse<S: AsRef<str>>(tsv: &str, allowed: &[S]) -> Result<Self, AttrError> {
        let labels: Vec<String> = allowed.iter().map(|s| s.as_ref().to_string()).collect();
        let mut map = BTreeMap::new();
        for (n, line) in tsv.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: &str| AttrError::MalformedRecord { line: n + 1, detail: detail.into() };
            let (emoji, label) = line.split_once('\t').ok_or_else(|| bad("expected emoji<TAB>label"))?;
            let idx = labels.iter().position(|l| l == label.trim()).ok_or_else(|| bad("label not in the configured set"))?;
            map.insert(normalize(emoji), idx);
        }
        Ok(EmotionMap { map, labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn label_of(&self, emoji: &str) -> Option<usize> {
        self.map.get(&normalize(emoji)).copied()
    }
}

#[derive(Debug, Clone, Deserialize)]
struct EmotionRecord {
    text: String,
    emojis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmotionDataset {
    pub labels: Vec<String>,
    pub examples: Vec<LabeledText>,
    /// Records whose emojis were all outside the map.
    pub dropped: usize,
}

/// Read `{"text", "emojis"}` JSONL and map emojis to multi-label targets.
pub fn import_emotion_labels(jsonl: &str, map: &EmotionMap) -> Result<EmotionDataset, AttrError> {
    let mut examples = Vec::new();
    let mut dropped = 0;
    for (n, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| AttrError::MalformedRecord { line: n + 1, detail };
        let rec: EmotionRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.emojis.is_empty() {
            return Err(bad("empty emoji list".into()));
        }
        let mut labels: Vec<usize> = rec.emojis.iter().filter_map(|e| map.label_of(e)).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.is_empty() {
            dropped += 1;
            continue;
        }
        examples.push(LabeledText { text: rec.text, labels });
    }
    Ok(EmotionDataset { labels: map.labels().to_vec(), examples, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_map_is_total_over_64() {
        let m = EmotionMap::bundled();
        assert_eq!(m.len(), 64);
        assert_eq!(m.labels().len(), 8);
        assert_eq!(m.label_of("😢"), Some(4));
        assert_eq!(m.label_of("❤️"), m.label_of("❤"));
    }

    #[test]
    fn import_maps_and_drops() {
        let m = EmotionMap::bundled();
        let data = "{\"text\":\"She weeps.\",\"emojis\":[\"😢\"]}\n{\"text\":\"x\",\"emojis\":[\"🦀\"]}\n";
        let ds = import_emotion_labels(data, &m).unwrap();
        assert_eq!(ds.examples.len(), 1);
        assert_eq!(ds.labels[ds.examples[0].labels[0]], "sadness");
        assert_eq!(ds.dropped, 1);
        let err = import_emotion_labels("{\"text\":\"x\",\"emojis\":[]}", &m).unwrap_err();
        assert!(matches!(err, AttrError::MalformedRecord { line: 1, .. }));
    }
}
