//! Generator for a synthetic two-style play corpus: plain first- and
//! second-person dialogue lines interleaved with parenthesized third-person
//! cues. Small enough to train the desk model in minutes, but the two styles
//! differ in both surface form and vocabulary, so a discriminator can
//! separate them and steering has something to find.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub scripts: usize,
    pub scenes_per_script: usize,
    /// Lines per scene are drawn uniformly from this inclusive range.
    pub min_lines: usize,
    pub max_lines: usize,
    /// Probability that a line is a cue.
    pub cue_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { scripts: 40, scenes_per_script: 3, min_lines: 8, max_lines: 14, cue_rate: 0.26, seed: 0 }
    }
}

const NAMES: &[&str] = &["ANNA", "BEN", "CAL", "DORA", "ELI", "FAYE", "GUS", "HAL", "IRIS", "JOE"];

const WANT: &[&str] = &["want", "need", "remember", "hate", "love", "miss", "understand", "believe"];
const THING: &[&str] = &[
    "the truth", "this house", "my mother", "your letter", "a drink", "the money", "that song", "my father",
    "the old days", "a little peace",
];
const FEEL: &[&str] = &["tired", "scared", "happy", "sorry", "fine", "lost", "angry", "ready"];
const INTERJ: &[&str] = &["Well", "Listen", "Look", "Oh", "Honestly", "Please", "No", "Yes"];
const GO: &[&str] = &["go", "leave", "stay", "talk", "wait", "eat"];
const WHERE: &[&str] = &["home", "tonight", "now", "tomorrow", "outside", "together"];
const SAY: &[&str] = &["say", "do", "think", "mean", "want"];

const WALK: &[&str] = &["walks", "crosses", "runs", "turns", "drifts", "hurries"];
const TOWARD: &[&str] = &["toward", "to", "away from", "past"];
const PLACE: &[&str] = &["door", "window", "table", "stairs", "piano", "fireplace", "bed", "kitchen"];
const ACT: &[&str] = &["sits down", "stands up", "looks away", "laughs", "freezes", "sighs", "kneels", "exits"];
const MANNER: &[&str] = &["slowly", "quietly", "suddenly", "nervously", "without a word", "stage left", "stage right"];
const LOOK: &[&str] = &["stares at", "looks at", "glances at", "watches", "turns to"];
const EFFECT: &[&str] = &[
    "(Lights fade.)", "(Pause.)", "(Silence.)", "(Blackout.)", "(A phone rings offstage.)",
    "(Thunder in the distance.)", "(The door slams.)",
];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty word list")
}

fn title_case(name: &str) -> String {
    let mut c = name.chars();
    c.next().map(|f| f.to_string() + &c.as_str().to_lowercase()).unwrap_or_default()
}

fn dialogue<R: Rng>(rng: &mut R, other: &str) -> String {
    match rng.random_range(0..6) {
        0 => format!("I {} {}.", pick(rng, WANT), pick(rng, THING)),
        1 => format!("Do you {} {}?", pick(rng, WANT), pick(rng, THING)),
        2 => format!("{}, {}. I feel {}.", pick(rng, INTERJ), title_case(other), pick(rng, FEEL)),
        3 => format!("We should {} {}.", pick(rng, GO), pick(rng, WHERE)),
        4 => format!("Why would you {} that?", pick(rng, SAY)),
        _ => format!("{}! You never {} {}.", pick(rng, INTERJ), pick(rng, WANT), pick(rng, THING)),
    }
}

fn cue<R: Rng>(rng: &mut R, who: &str, other: &str) -> String {
    match rng.random_range(0..5) {
        0 => format!("({who} {} {} the {}.)", pick(rng, WALK), pick(rng, TOWARD), pick(rng, PLACE)),
        1 => format!("({who} {} {}.)", pick(rng, ACT), pick(rng, MANNER)),
        2 => format!("({who} {} {other} {}.)", pick(rng, LOOK), pick(rng, MANNER)),
        3 => format!("({who} and {other} {} together.)", pick(rng, &["laugh", "sit down", "freeze", "exit"])),
        _ => pick(rng, EFFECT).to_string(),
    }
}

/// Raw script texts, one per script, in the plain-text layout the parser
/// reads (`SCENE n` markers, `NAME: text` dialogue, `(…)` cues).
pub fn two_style_scripts(spec: &SyntheticSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = (spec.min_lines.max(2), spec.max_lines.max(spec.min_lines.max(2)));
    (0..spec.scripts)
        .map(|i| {
            let mut out = format!("Synthetic play {}\n\n", i + 1);
            for s in 0..spec.scenes_per_script {
                out.push_str(&format!("SCENE {}\n", s + 1));
                let cast: Vec<&str> = NAMES.choose_multiple(&mut rng, 2).copied().collect();
                let n = rng.random_range(lo..=hi);
                let mut lines: Vec<bool> = (0..n).map(|_| rng.random_bool(spec.cue_rate)).collect();
                // every scene carries both kinds, as the parser requires of a page
                if lines.iter().all(|&c| c) {
                    lines[0] = false;
                }
                if !lines.iter().any(|&c| c) {
                    let at = rng.random_range(1..n);
                    lines[at] = true;
                }
                let mut turn = 0;
                for is_cue in lines {
                    let (who, other) = (cast[turn % 2], cast[(turn + 1) % 2]);
                    if is_cue {
                        out.push_str(&cue(&mut rng, who, other));
                    } else {
                        out.push_str(&format!("{who}: {}", dialogue(&mut rng, other)));
                        turn += 1;
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
            out
        })
        .collect()
}
