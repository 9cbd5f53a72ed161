//! Play-script corpus: parsing raw scripts into scenes of dialogue and cue
//! lines, text normalization, per-cue statistics and script-level splits.

mod jsonl;
mod parse;
mod preprocess;
mod split;
mod stats;

pub use jsonl::{read_jsonl, write_jsonl, LineRecord};
pub use parse::{parse_script, PAGE_LINES};
pub use preprocess::{collapse_whitespace, is_punct, preprocess, tokens};
pub use split::{split, Split, SplitSpec};
pub use stats::{scene_stats, CueStats, PosLexicon, StatsReport, NAME_BINS, VERB_BINS};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("input is empty")]
    EmptyInput,
    #[error("no dialogue line found in input")]
    NoDialogueFound,
    #[error("no page contains both a dialogue line and a cue")]
    NoRetainedPages,
    #[error("need at least 3 scripts to split, got {0}")]
    TooFewScripts(usize),
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {detail}")]
    BadRecord { line: usize, detail: String },
}

impl CorpusError {
    /// Stable error name used on the wire.
    pub fn name(&self) -> &'static str {
        match self {
            CorpusError::EmptyInput => "EmptyInput",
            CorpusError::NoDialogueFound => "NoDialogueFound",
            CorpusError::NoRetainedPages => "NoRetainedPages",
            CorpusError::TooFewScripts(_) => "TooFewScripts",
            CorpusError::InvalidSplit(_) => "InvalidSplit",
            CorpusError::Json { .. } => "MalformedJson",
            CorpusError::BadRecord { .. } => "BadRecord",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineKind {
    Dialogue,
    Cue,
}

/// Byte range `[start, end)` into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub index: usize,
    pub kind: LineKind,
    pub speaker: Option<String>,
    /// Whitespace-collapsed text. Cues keep their enclosing parentheses.
    pub text: String,
    pub raw_span: Span,
    /// Page of the source the line started on.
    #[serde(default)]
    pub page: usize,
}

impl Line {
    pub fn dialogue(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Line {
            index: 0,
            kind: LineKind::Dialogue,
            speaker: Some(speaker.into()),
            text: text.into(),
            raw_span: Span::default(),
            page: 0,
        }
    }

    pub fn cue(text: impl Into<String>) -> Self {
        Line {
            index: 0,
            kind: LineKind::Cue,
            speaker: None,
            text: text.into(),
            raw_span: Span::default(),
            page: 0,
        }
    }

    pub fn is_cue(&self) -> bool {
        self.kind == LineKind::Cue
    }

    /// The line as it appears in the canonical text layout.
    pub fn canonical(&self) -> String {
        match (&self.kind, &self.speaker) {
            (LineKind::Dialogue, Some(s)) => format!("{s}: {}", self.text),
            _ => self.text.clone(),
        }
    }

    /// The line as the language model sees it: `NAME . text` for dialogue,
    /// the preprocessed cue for cues.
    pub fn model_text(&self) -> String {
        match (&self.kind, &self.speaker) {
            (LineKind::Dialogue, Some(s)) => preprocess(&format!("{s}. {}", self.text)),
            _ => preprocess(&self.text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub lines: Vec<Line>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub id: String,
    pub title: String,
    pub scenes: Vec<Scene>,
    pub source_hash: String,
}

impl Script {
    pub fn lines(&self) -> impl Iterator<Item = &Line> {
        self.scenes.iter().flat_map(|s| s.lines.iter())
    }

    pub fn line_count(&self) -> usize {
        self.scenes.iter().map(|s| s.lines.len()).sum()
    }

    pub fn dialogue_count(&self) -> usize {
        self.lines().filter(|l| l.kind == LineKind::Dialogue).count()
    }

    pub fn cue_count(&self) -> usize {
        self.lines().filter(|l| l.kind == LineKind::Cue).count()
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.lines().filter_map(|l| l.speaker.clone()).collect()
    }

    /// Compare scene structure and (kind, speaker, text) of every line,
    /// ignoring spans, pages and ids.
    pub fn same_content(&self, other: &Script) -> bool {
        self.scenes.len() == other.scenes.len()
            && self.scenes.iter().zip(&other.scenes).all(|(a, b)| {
                a.lines.len() == b.lines.len()
                    && a.lines.iter().zip(&b.lines).all(|(x, y)| {
                        x.kind == y.kind && x.speaker == y.speaker && x.text == y.text
                    })
            })
    }

    /// Render the canonical text layout: title, one `SCENE n` marker per
    /// scene, one line per script line, and a form feed after every page.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.title);
        out.push_str("\n\n");
        let mut page = None;
        for scene in &self.scenes {
            let mut marker_done = false;
            for line in &scene.lines {
                if page.is_some_and(|p| p != line.page) {
                    out.push_str("\x0c\n");
                }
                page = Some(line.page);
                if !marker_done {
                    out.push_str(&format!("SCENE {}\n", scene.index + 1));
                    marker_done = true;
                }
                out.push_str(&line.canonical());
                out.push('\n');
            }
        }
        out.push_str("\x0c\n");
        out
    }

    /// Insert `line` after position `after` of scene `scene`, re-indexing.
    /// The new line inherits the page of its predecessor.
    pub fn insert_line(&mut self, scene: usize, after: usize, mut line: Line) -> Option<usize> {
        let sc = self.scenes.get_mut(scene)?;
        let prev = sc.lines.get(after)?;
        line.page = prev.page;
        line.raw_span = Span { start: prev.raw_span.end, end: prev.raw_span.end };
        sc.lines.insert(after + 1, line);
        for (i, l) in sc.lines.iter_mut().enumerate() {
            l.index = i;
        }
        Some(after + 1)
    }
}

/// Stable content digest used for script ids and dedup.
pub fn content_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_text_layout() {
        assert_eq!(Line::dialogue("CAL", "My mother is dead.").model_text(), "CAL . My mother is dead .");
        assert_eq!(Line::cue("(She pulls back the sheet.)").model_text(), "( She pulls back the sheet . )");
    }

    #[test]
    fn insert_reindexes() {
        let mut s = parse_script("AL: hi.\n(Nods.)\nBO: bye.\n").unwrap();
        let at = s.insert_line(0, 0, Line::cue("(Waits.)")).unwrap();
        assert_eq!(at, 1);
        let idx: Vec<usize> = s.scenes[0].lines.iter().map(|l| l.index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(s.scenes[0].lines[1].text, "(Waits.)");
        assert!(s.insert_line(0, 9, Line::cue("(x)")).is_none());
    }
}
