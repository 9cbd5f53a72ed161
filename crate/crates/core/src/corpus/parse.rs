use std::sync::LazyLock;

use regex::Regex;

use super::{collapse_whitespace, content_hash, CorpusError, Line, LineKind, Scene, Script, Span};

/// Physical lines per page when the source carries no form feeds.
pub const PAGE_LINES: usize = 40;

static SCENE_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(ACT|SCENE)\b").unwrap());

// Names may contain periods ("DR. SMITH") only when a colon terminates them;
// otherwise the first period ends the name ("CAL. My mother is dead.").
static SPEAKER_COLON: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*([A-Z][A-Z'.’]*(?:[ \t]+[A-Z][A-Z'.’]*){0,3})[ \t]*:").unwrap()
});
static SPEAKER_PERIOD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*([A-Z][A-Z'’]*(?:[ \t]+[A-Z][A-Z'’]*){0,3})[ \t]*\.").unwrap()
});

/// Returns the speaker name and the byte offset just past the delimiter.
fn speaker_prefix(line: &str) -> Option<(String, usize, usize)> {
    let caps = SPEAKER_COLON.captures(line).or_else(|| SPEAKER_PERIOD.captures(line))?;
    let name = caps.get(1)?;
    let whole = caps.get(0)?;
    let letters = name.as_str().chars().filter(|c| c.is_ascii_uppercase()).count();
    (letters >= 2).then(|| (collapse_whitespace(name.as_str()), name.start(), whole.end()))
}

struct Pending {
    speaker: String,
    text: String,
    start: usize,
    end: usize,
    page: usize,
}

struct OpenCue {
    start: usize,
    depth: usize,
    page: usize,
}

#[derive(Default)]
struct Builder {
    scenes: Vec<Vec<Line>>,
    speaker: Option<String>,
    /// Start of a speaker prefix not yet covered by an emitted line.
    prefix_start: Option<usize>,
    pending: Option<Pending>,
    cue: Option<OpenCue>,
}

impl Builder {
    fn push(&mut self, mut line: Line) {
        if let Some(p) = self.prefix_start.take() {
            line.raw_span.start = line.raw_span.start.min(p);
        }
        if self.scenes.is_empty() {
            self.scenes.push(Vec::new());
        }
        self.scenes.last_mut().unwrap().push(line);
    }

    fn flush_dialogue(&mut self) {
        if let Some(p) = self.pending.take() {
            let text = collapse_whitespace(&p.text);
            if !text.is_empty() {
                self.push(Line {
                    index: 0,
                    kind: LineKind::Dialogue,
                    speaker: Some(p.speaker),
                    text,
                    raw_span: Span { start: p.start, end: p.end },
                    page: p.page,
                });
            }
        }
    }

    fn end_dialogue(&mut self) {
        self.flush_dialogue();
        self.speaker = None;
        self.prefix_start = None;
    }

    /// Scan `seg` (which starts at byte `base` of `src`) for text and
    /// parenthesized cues.
    fn scan(&mut self, src: &str, base: usize, seg: &str, page: usize) {
        for (i, c) in seg.char_indices() {
            let at = base + i;
            if let Some(cue) = self.cue.as_mut() {
                match c {
                    '(' => cue.depth += 1,
                    ')' => cue.depth -= 1,
                    _ => {}
                }
                if cue.depth == 0 {
                    let cue = self.cue.take().unwrap();
                    let end = at + c.len_utf8();
                    self.push(Line {
                        index: 0,
                        kind: LineKind::Cue,
                        speaker: None,
                        text: collapse_whitespace(&src[cue.start..end]),
                        raw_span: Span { start: cue.start, end },
                        page: cue.page,
                    });
                }
            } else if c == '(' {
                self.flush_dialogue();
                self.cue = Some(OpenCue { start: at, depth: 1, page });
            } else if let Some(speaker) = &self.speaker {
                let end = at + c.len_utf8();
                match self.pending.as_mut() {
                    Some(p) => {
                        p.text.push(c);
                        if !c.is_whitespace() {
                            p.end = end;
                        }
                    }
                    None if !c.is_whitespace() => {
                        self.pending = Some(Pending {
                            speaker: speaker.clone(),
                            text: c.to_string(),
                            start: at,
                            end,
                            page,
                        });
                    }
                    None => {}
                }
            }
        }
        if let Some(p) = self.pending.as_mut() {
            p.text.push(' ');
        }
    }
}

fn page_of_lines(raw: &str) -> Vec<(usize, &str, usize)> {
    let ff_mode = raw.contains('\x0c');
    let mut out = Vec::new();
    let mut offset = 0;
    let mut ff_seen = 0;
    for (n, phys) in raw.split_inclusive('\n').enumerate() {
        let content = phys.trim_end_matches(['\n', '\r']);
        let leading_ff = content.chars().take_while(|c| c.is_whitespace()).filter(|&c| c == '\x0c').count();
        let page = if ff_mode { ff_seen + leading_ff } else { n / PAGE_LINES };
        out.push((offset, content, page));
        ff_seen += phys.matches('\x0c').count();
        offset += phys.len();
    }
    out
}

/// Parse raw play-script text into a [`Script`].
///
/// Lines are classified as dialogue (an uppercase name of one to four
/// tokens followed by `:` or `.`) or cues (parenthesized spans, possibly
/// spanning several physical lines or embedded inside dialogue). Text
/// before the first `ACT`/`SCENE` marker is treated as front matter when
/// such a marker exists. Pages (form-feed separated, or blocks of
/// [`PAGE_LINES`] lines) lacking either a dialogue line or a cue are dropped.
pub fn parse_script(raw: &str) -> Result<Script, CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let physical = page_of_lines(raw);
    let first_marker = physical.iter().position(|(_, l, _)| SCENE_MARKER.is_match(l));
    let title = physical[..first_marker.unwrap_or(0)]
        .iter()
        .map(|(_, l, _)| l.trim_matches(|c: char| c.is_whitespace() || c == '\x0c'))
        .find(|l| !l.is_empty())
        .unwrap_or("Untitled")
        .to_string();

    let mut b = Builder::default();
    for &(offset, content, page) in &physical[first_marker.unwrap_or(0)..] {
        let blank = content.trim_matches(|c: char| c.is_whitespace() || c == '\x0c').is_empty();
        if b.cue.is_some() {
            if blank {
                // unterminated cue: discard it rather than swallow the scene
                b.cue = None;
                b.end_dialogue();
            } else {
                b.scan(raw, offset, content, page);
            }
            continue;
        }
        if blank {
            b.end_dialogue();
        } else if SCENE_MARKER.is_match(content) {
            b.end_dialogue();
            b.scenes.push(Vec::new());
        } else if let Some((name, name_start, rest)) = speaker_prefix(content) {
            b.end_dialogue();
            b.speaker = Some(name);
            b.prefix_start = Some(offset + name_start);
            b.scan(raw, offset + rest, &content[rest..], page);
        } else {
            b.scan(raw, offset, content, page);
        }
    }
    b.cue = None;
    b.end_dialogue();

    let all: Vec<&Line> = b.scenes.iter().flatten().collect();
    if !all.iter().any(|l| l.kind == LineKind::Dialogue) {
        return Err(CorpusError::NoDialogueFound);
    }
    let pages_with = |kind| {
        all.iter().filter(|l| l.kind == kind).map(|l| l.page).collect::<std::collections::BTreeSet<_>>()
    };
    let dialogue_pages = pages_with(LineKind::Dialogue);
    let cue_pages = pages_with(LineKind::Cue);

    let mut scenes = Vec::new();
    for lines in b.scenes {
        let kept: Vec<Line> = lines
            .into_iter()
            .filter(|l| dialogue_pages.contains(&l.page) && cue_pages.contains(&l.page))
            .enumerate()
            .map(|(i, mut l)| {
                l.index = i;
                l
            })
            .collect();
        if !kept.is_empty() {
            scenes.push(Scene { index: scenes.len(), lines: kept });
        }
    }
    if scenes.is_empty() {
        return Err(CorpusError::NoRetainedPages);
    }
    let source_hash = content_hash(raw);
    Ok(Script { id: format!("script-{}", &source_hash[..12]), title, scenes, source_hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &Script) -> Vec<(LineKind, Option<String>, String)> {
        s.lines().map(|l| (l.kind, l.speaker.clone(), l.text.clone())).collect()
    }

    #[test]
    fn dialogue_then_cue() {
        let s = parse_script("JOHN: I don't know what to do anymore.\n(JOHN turns around and leaves.)").unwrap();
        assert_eq!(
            kinds(&s),
            vec![
                (LineKind::Dialogue, Some("JOHN".into()), "I don't know what to do anymore.".into()),
                (LineKind::Cue, None, "(JOHN turns around and leaves.)".into()),
            ]
        );
        assert_eq!(s.title, "Untitled");
    }

    #[test]
    fn inline_cue_splits_dialogue() {
        let s = parse_script("LIZZIE: How do you…? (Putting things together:) No . . .").unwrap();
        assert_eq!(
            kinds(&s),
            vec![
                (LineKind::Dialogue, Some("LIZZIE".into()), "How do you…?".into()),
                (LineKind::Cue, None, "(Putting things together:)".into()),
                (LineKind::Dialogue, Some("LIZZIE".into()), "No . . .".into()),
            ]
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_script(""), Err(CorpusError::EmptyInput)));
        assert!(matches!(parse_script("  \n\t"), Err(CorpusError::EmptyInput)));
        let cues = "(Silence as ROLAND exits stage left.)\n(LOWELL looks toward the stage right door.)";
        assert!(matches!(parse_script(cues), Err(CorpusError::NoDialogueFound)));
        assert!(matches!(parse_script("JOHN: Hello there."), Err(CorpusError::NoRetainedPages)));
    }

    #[test]
    fn period_delimited_names() {
        let s = parse_script("CAL. My mother is dead.\n(She pulls back the sheet.)\nMISS BLAINE. It's not.").unwrap();
        let k = kinds(&s);
        assert_eq!(k[0], (LineKind::Dialogue, Some("CAL".into()), "My mother is dead.".into()));
        assert_eq!(k[2], (LineKind::Dialogue, Some("MISS BLAINE".into()), "It's not.".into()));
        let s = parse_script("DR. SMITH: Sit.\n(He sits.)").unwrap();
        assert_eq!(s.scenes[0].lines[0].speaker.as_deref(), Some("DR. SMITH"));
    }

    #[test]
    fn multiline_cue_and_continuation() {
        let raw = "GRAHAM: Wait,\nplease wait.\n(GRAHAM runs into the bathroom, stage right. He begins to vomit\n  loudly. The knocking becomes even more persistent.)\nstill here.\n";
        let s = parse_script(raw).unwrap();
        let k = kinds(&s);
        assert_eq!(k.len(), 3);
        assert_eq!(k[0].2, "Wait, please wait.");
        assert_eq!(
            k[1].2,
            "(GRAHAM runs into the bathroom, stage right. He begins to vomit loudly. The knocking becomes even more persistent.)"
        );
        assert_eq!(k[2], (LineKind::Dialogue, Some("GRAHAM".into()), "still here.".into()));
        let cue = &s.scenes[0].lines[1];
        assert!(raw[cue.raw_span.start..cue.raw_span.end].starts_with("(GRAHAM"));
        assert!(raw[cue.raw_span.start..cue.raw_span.end].ends_with("persistent.)"));
    }

    #[test]
    fn scenes_and_front_matter() {
        let raw = "MY PLAY\nBY SOMEONE: notes.\n\nACT ONE\nScene 1\nAL: Hi.\n(Waves.)\n\nSCENE 2\nBO: Bye.\n(Leaves.)\n";
        let s = parse_script(raw).unwrap();
        assert_eq!(s.title, "MY PLAY");
        assert_eq!(s.scenes.len(), 2);
        assert_eq!(s.scenes[1].index, 1);
        assert_eq!(s.dialogue_count(), 2);
    }

    #[test]
    fn nested_parens_and_speaker_prefix_span() {
        let raw = "LIZZIE: (Weeps (quietly). Takes a moment.)\nLIZZIE: Fine.";
        let s = parse_script(raw).unwrap();
        let cue = &s.scenes[0].lines[0];
        assert_eq!(cue.text, "(Weeps (quietly). Takes a moment.)");
        assert_eq!(cue.raw_span.start, 0);
    }

    #[test]
    fn drops_pages_without_both_kinds() {
        let raw = "AL: One.\n(Cue one.)\n\x0cBO: Only dialogue here.\n\x0cCY: Three.\n(Cue three.)\n";
        let s = parse_script(raw).unwrap();
        let speakers: Vec<_> = s.lines().filter_map(|l| l.speaker.clone()).collect();
        assert_eq!(speakers, vec!["AL", "CY"]);
        assert_eq!(s.scenes[0].lines.iter().map(|l| l.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn forty_line_pages_without_form_feeds() {
        let mut raw = String::from("AL: start.\n(cue.)\n");
        for _ in 0..(PAGE_LINES - 2) {
            raw.push_str("AL: filler.\n");
        }
        raw.push_str("BO: dropped.\n");
        let s = parse_script(&raw).unwrap();
        assert_eq!(s.line_count(), PAGE_LINES);
    }

    #[test]
    fn canonical_round_trip() {
        let raw = "T\n\nSCENE 1\nLIZZIE: How do you…? (Putting things together:) No . . .\nJOHN: Go.\n\nSCENE 2\n(Dark.)\nAL: x\ny\n";
        let s = parse_script(raw).unwrap();
        let again = parse_script(&s.to_canonical_text()).unwrap();
        assert!(s.same_content(&again));
        assert_eq!(again.title, "T");
    }
}
