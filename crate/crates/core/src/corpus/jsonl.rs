use serde::{Deserialize, Serialize};

use super::{content_hash, CorpusError, Line, LineKind, Scene, Script, Span};

/// One line of the JSONL corpus format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub script_id: String,
    pub scene: usize,
    pub index: usize,
    pub kind: LineKind,
    pub speaker: Option<String>,
    pub text: String,
}

pub fn write_jsonl(scripts: &[Script]) -> String {
    let mut out = String::new();
    for script in scripts {
        for scene in &script.scenes {
            for line in &scene.lines {
                let rec = LineRecord {
                    script_id: script.id.clone(),
                    scene: scene.index,
                    index: line.index,
                    kind: line.kind,
                    speaker: line.speaker.clone(),
                    text: line.text.clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    out
}

/// Read a JSONL corpus back into scripts, grouped by `script_id` in order of
/// first appearance. Titles are not stored in the format; the id is used.
pub fn read_jsonl(text: &str) -> Result<Vec<Script>, CorpusError> {
    let mut scripts: Vec<Script> = Vec::new();
    let mut digests: Vec<String> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: LineRecord =
            serde_json::from_str(raw).map_err(|source| CorpusError::Json { line: n + 1, source })?;
        if rec.kind == LineKind::Dialogue && rec.speaker.is_none() {
            return Err(CorpusError::BadRecord { line: n + 1, detail: "dialogue without speaker".into() });
        }
        if rec.text.trim().is_empty() {
            return Err(CorpusError::BadRecord { line: n + 1, detail: "empty text".into() });
        }
        let pos = match scripts.iter().position(|s| s.id == rec.script_id) {
            Some(p) => p,
            None => {
                scripts.push(Script {
                    id: rec.script_id.clone(),
                    title: rec.script_id.clone(),
                    scenes: Vec::new(),
                    source_hash: String::new(),
                });
                digests.push(String::new());
                scripts.len() - 1
            }
        };
        digests[pos].push_str(raw);
        digests[pos].push('\n');
        let script = &mut scripts[pos];
        let scene = match script.scenes.iter().position(|s| s.index == rec.scene) {
            Some(p) => p,
            None => {
                script.scenes.push(Scene { index: rec.scene, lines: Vec::new() });
                script.scenes.len() - 1
            }
        };
        script.scenes[scene].lines.push(Line {
            index: rec.index,
            kind: rec.kind,
            speaker: rec.speaker,
            text: rec.text,
            raw_span: Span::default(),
            page: 0,
        });
    }
    for (script, digest) in scripts.iter_mut().zip(&digests) {
        script.source_hash = content_hash(digest);
        script.scenes.sort_by_key(|s| s.index);
        for (i, scene) in script.scenes.iter_mut().enumerate() {
            scene.index = i;
            scene.lines.sort_by_key(|l| l.index);
            for (j, line) in scene.lines.iter_mut().enumerate() {
                line.index = j;
            }
        }
    }
    Ok(scripts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_script;

    #[test]
    fn round_trip() {
        let s = parse_script("AL: One.\n(Cue one.)\nBO: Two.").unwrap();
        let text = write_jsonl(std::slice::from_ref(&s));
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "dialogue");
        assert_eq!(first["speaker"], "AL");
        let back = read_jsonl(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].same_content(&s));
        assert_eq!(back[0].id, s.id);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(matches!(read_jsonl("{nope"), Err(CorpusError::Json { line: 1, .. })));
        let bad = r#"{"script_id":"a","scene":0,"index":0,"kind":"dialogue","speaker":null,"text":"x"}"#;
        assert!(matches!(read_jsonl(bad), Err(CorpusError::BadRecord { .. })));
    }
}
