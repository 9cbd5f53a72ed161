use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{tokens, Script};

/// Histogram caps: the last bin collects everything at or above it.
pub const NAME_BINS: usize = 10;
pub const VERB_BINS: usize = 20;

const DEFAULT_LEXICON: &str = include_str!("../../data/pos_lexicon.tsv");

/// Word → part-of-speech tags, read from `word<TAB>TAG[,TAG...]` lines.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    tags: HashMap<String, Vec<String>>,
}

impl PosLexicon {
    pub fn parse(text: &str) -> Self {
        let mut tags = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let (Some(word), Some(t)) = (parts.next(), parts.next()) else { continue };
            tags.insert(
                word.to_lowercase(),
                t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            );
        }
        PosLexicon { tags }
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }

    pub fn is_verb(&self, word: &str) -> bool {
        self.tags
            .get(&word.to_lowercase())
            .is_some_and(|t| t.iter().any(|tag| tag.starts_with("VB")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueStats {
    pub scene: usize,
    pub index: usize,
    pub names: usize,
    pub verbs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub script_id: String,
    pub cues: Vec<CueStats>,
    /// `names_histogram[i]` = number of cues with `i` distinct character
    /// names (last bin is open-ended). Empty when there are no cues.
    pub names_histogram: Vec<usize>,
    pub verbs_histogram: Vec<usize>,
}

fn histogram(values: impl Iterator<Item = usize>, cap: usize) -> Vec<usize> {
    let mut bins: Vec<usize> = Vec::new();
    for v in values {
        let b = v.min(cap);
        if bins.len() <= b {
            bins.resize(b + 1, 0);
        }
        bins[b] += 1;
    }
    bins
}

/// Count distinct known character names and lexicon verbs in every cue.
///
/// Names are the script's dialogue speakers, matched case-sensitively as
/// whole token sequences so that `WILL` the character is not confused
/// with `will` the auxiliary.
pub fn scene_stats(script: &Script, lexicon: &PosLexicon) -> StatsReport {
    let names: Vec<Vec<String>> = script
        .speakers()
        .into_iter()
        .map(|n| n.split_whitespace().map(str::to_string).collect())
        .collect();
    let mut cues = Vec::new();
    for scene in &script.scenes {
        for line in scene.lines.iter().filter(|l| l.is_cue()) {
            let toks = tokens(&line.text);
            let mut found = BTreeSet::new();
            for (i, name) in names.iter().enumerate() {
                if !name.is_empty() && toks.windows(name.len()).any(|w| w == name.as_slice()) {
                    found.insert(i);
                }
            }
            let verbs = toks.iter().filter(|t| lexicon.is_verb(t)).count();
            cues.push(CueStats { scene: scene.index, index: line.index, names: found.len(), verbs });
        }
    }
    StatsReport {
        script_id: script.id.clone(),
        names_histogram: histogram(cues.iter().map(|c| c.names), NAME_BINS),
        verbs_histogram: histogram(cues.iter().map(|c| c.verbs), VERB_BINS),
        cues,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_script;

    #[test]
    fn counts_names_and_verbs() {
        let s = parse_script("JOHN: I don't know what to do anymore.\n(JOHN turns around and leaves.)\n(Silence.)").unwrap();
        let r = scene_stats(&s, &PosLexicon::bundled());
        assert_eq!(r.cues.len(), 2);
        assert_eq!(r.cues[0].names, 1);
        assert_eq!(r.cues[0].verbs, 2);
        assert_eq!((r.cues[1].names, r.cues[1].verbs), (0, 0));
        assert_eq!(r.names_histogram, vec![1, 1]);
        assert_eq!(r.verbs_histogram, vec![1, 0, 1]);
    }

    #[test]
    fn multi_token_names_and_case() {
        let s = parse_script("MISS BLAINE: Hi.\nWILL: Yo.\n(MISS BLAINE glares. Someone will go. WILL sits.)").unwrap();
        let r = scene_stats(&s, &PosLexicon::bundled());
        assert_eq!(r.cues[0].names, 2);
    }

    #[test]
    fn no_cues_gives_empty_histograms() {
        let mut s = parse_script("AL: Hi.\n(Nods.)").unwrap();
        s.scenes[0].lines.retain(|l| !l.is_cue());
        let r = scene_stats(&s, &PosLexicon::bundled());
        assert!(r.names_histogram.is_empty() && r.verbs_histogram.is_empty());
    }

    #[test]
    fn overflow_bin() {
        assert_eq!(histogram([0, 25, 3].into_iter(), 20).len(), 21);
        assert_eq!(histogram([25].into_iter(), 20)[20], 1);
    }
}
