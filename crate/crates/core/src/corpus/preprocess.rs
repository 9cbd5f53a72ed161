/// True for characters that are split off into their own token.
///
/// Anything that is neither alphanumeric nor whitespace counts, which covers
/// unicode punctuation such as `…` and `“` as well as symbols.
pub fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Split every punctuation character off into its own space-separated token
/// and collapse runs of whitespace to a single space.
///
/// Apostrophes between two alphanumerics stay inside the word (`don't`).
pub fn preprocess(text: &str) -> String {
    tokens(text).join(" ")
}

/// The tokens `preprocess` would join, without allocating the joined string.
pub fn tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if is_punct(c) && !is_word_apostrophe(&chars, i) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn is_word_apostrophe(chars: &[char], i: usize) -> bool {
    matches!(chars[i], '\'' | '’')
        && i > 0
        && i + 1 < chars.len()
        && chars[i - 1].is_alphanumeric()
        && chars[i + 1].is_alphanumeric()
}

/// Collapse whitespace runs to single spaces and trim.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_trailing_punctuation() {
        assert_eq!(preprocess("leaves.)"), "leaves . )");
        assert_eq!(preprocess("Weeps."), "Weeps .");
        assert_eq!(preprocess("abc"), "abc");
    }

    #[test]
    fn keeps_contractions_and_collapses_space() {
        assert_eq!(preprocess("  I don't   know!"), "I don't know !");
        assert_eq!(preprocess("'tis"), "' tis");
        assert_eq!(preprocess("How do you…?"), "How do you … ?");
        assert_eq!(preprocess(""), "");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn idempotent(s in "[a-zA-Z0-9 .,!?'()…:\\-\t\n]{0,40}") {
            let once = preprocess(&s);
            prop_assert_eq!(preprocess(&once), once);
        }
    }
}
