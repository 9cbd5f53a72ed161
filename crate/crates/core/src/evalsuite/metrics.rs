use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

pub fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ca == cb { diag } else { 1 + diag.min(up).min(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Edit distance if it is at most `k`, otherwise `k + 1`.
pub fn levenshtein_bounded(a: &str, b: &str, k: usize) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    banded(&a, &b, k)
}

/// Diagonal-band DP: only cells with `|i − j| ≤ k` can lie on a path of
/// cost ≤ k. Exits once a whole band row exceeds `k`.
pub(crate) fn banded(a: &[char], b: &[char], k: usize) -> usize {
    let (n, m) = (a.len(), b.len());
    if n.abs_diff(m) > k {
        return k + 1;
    }
    if n == 0 || m == 0 {
        return n.max(m);
    }
    let inf = k + 1;
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    for (j, p) in prev.iter_mut().enumerate().take(k.min(m) + 1) {
        *p = j;
    }
    for i in 1..=n {
        let lo = i.saturating_sub(k).max(1);
        let hi = (i + k).min(m);
        cur[lo - 1] = if lo == 1 && i <= k { i } else { inf };
        let mut row_min = cur[lo - 1];
        for j in lo..=hi {
            let sub = prev[j - 1] + (a[i - 1] != b[j - 1]) as usize;
            let del = prev[j] + 1;
            let ins = cur[j - 1] + 1;
            let v = sub.min(del).min(ins).min(inf);
            cur[j] = v;
            row_min = row_min.min(v);
        }
        if hi < m {
            cur[hi + 1] = inf;
        }
        if row_min > k {
            return inf;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m].min(inf)
}

/// Bit-parallel edit distance for a pattern of at most 64 characters
/// (Myers 1999, in Hyyrö's global-distance form).
pub(crate) struct MyersPattern {
    len: usize,
    ascii: [u64; 128],
    other: HashMap<char, u64>,
}

impl MyersPattern {
    pub fn new(pattern: &[char]) -> Option<Self> {
        if pattern.len() > 64 {
            return None;
        }
        let mut ascii = [0u64; 128];
        let mut other = HashMap::new();
        for (i, &c) in pattern.iter().enumerate() {
            if (c as u32) < 128 {
                ascii[c as usize] |= 1 << i;
            } else {
                *other.entry(c).or_insert(0) |= 1 << i;
            }
        }
        Some(MyersPattern { len: pattern.len(), ascii, other })
    }

    fn peq(&self, c: char) -> u64 {
        if (c as u32) < 128 {
            self.ascii[c as usize]
        } else {
            self.other.get(&c).copied().unwrap_or(0)
        }
    }

    /// Distance to `text` if at most `k`, otherwise `k + 1`.
    pub fn distance(&self, text: &[char], k: usize) -> usize {
        let m = self.len;
        if m == 0 {
            return text.len().min(k + 1);
        }
        if m.abs_diff(text.len()) > k {
            return k + 1;
        }
        let mask = if m == 64 { !0u64 } else { (1u64 << m) - 1 };
        let high = 1u64 << (m - 1);
        let (mut pv, mut mv) = (mask, 0u64);
        let mut score = m;
        let n = text.len();
        for (j, &c) in text.iter().enumerate() {
            let eq = self.peq(c);
            let xv = eq | mv;
            let xh = (((eq & pv).wrapping_add(pv)) ^ pv) | eq;
            let mut ph = mv | !(xh | pv);
            let mut mh = pv & xh;
            if ph & high != 0 {
                score += 1;
            } else if mh & high != 0 {
                score -= 1;
            }
            // the top row grows by one per column
            ph = (ph << 1) | 1;
            mh <<= 1;
            pv = (mh | !(xv | ph)) & mask;
            mv = ph & xv & mask;
            // each remaining column lowers the score by at most one
            if score > k + (n - j - 1) {
                return k + 1;
            }
        }
        score.min(k + 1)
    }
}

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &ca in a {
        let mut diag = 0;
        for (j, &cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ca == cb { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Longest common subsequence length over the longer string's length.
pub fn lcsr(a: &str, b: &str) -> Result<f64, EvalError> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    lcsr_chars(&a, &b)
}

pub(crate) fn lcsr_chars(a: &[char], b: &[char]) -> Result<f64, EvalError> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(EvalError::BothEmpty);
    }
    Ok(lcs_len(a, b) as f64 / longest as f64)
}

/// Kondrak's bigram similarity: each string gets one leading boundary
/// symbol and contributes one positional bigram per character; matching
/// two bigrams scores the fraction of positions that agree.
pub fn bi_sim(a: &str, b: &str) -> Result<f64, EvalError> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    bi_sim_chars(&a, &b)
}

pub(crate) fn bi_sim_chars(a: &[char], b: &[char]) -> Result<f64, EvalError> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(EvalError::BothEmpty);
    }
    // bigram i is (previous char or boundary, char i); None is the boundary
    let prev = |s: &[char], i: usize| if i == 0 { None } else { Some(s[i - 1]) };
    let mut row = vec![0.0f64; b.len() + 1];
    for i in 0..a.len() {
        let mut diag = 0.0;
        for j in 0..b.len() {
            let same = (prev(a, i) == prev(b, j)) as u8 + (a[i] == b[j]) as u8;
            let up = row[j + 1];
            row[j + 1] = (diag + same as f64 / 2.0).max(up).max(row[j]);
            diag = up;
        }
    }
    Ok(row[b.len()] / longest as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistNorm {
    /// Distinct n-grams over total n-grams.
    #[default]
    NgramCount,
    /// Distinct n-grams over total tokens.
    TokenCount,
}

/// Distinct n-grams across all texts, normalized per `norm`.
pub fn dist_n<S: AsRef<str>>(texts: &[Vec<S>], n: usize, norm: DistNorm) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidConfig("n must be at least 1".into()));
    }
    let mut distinct: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    let mut tokens = 0usize;
    for t in texts {
        tokens += t.len();
        if t.len() < n {
            continue;
        }
        for w in t.windows(n) {
            distinct.insert(w.iter().map(|s| s.as_ref()).collect());
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::NoNgrams);
    }
    let denom = match norm {
        DistNorm::NgramCount => total,
        DistNorm::TokenCount => tokens,
    };
    Ok(distinct.len() as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws(s: &[&str]) -> Vec<Vec<String>> {
        s.iter().map(|t| t.split_whitespace().map(String::from).collect()).collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }

    #[test]
    fn bounded_and_bitparallel_agree() {
        let pairs = [("kitten", "sitting"), ("", "ab"), ("abcdef", "azced"), ("flaw", "lawn"), ("ab", "ba")];
        for (a, b) in pairs {
            let exact = levenshtein(a, b);
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            let my = MyersPattern::new(&ac).unwrap();
            for k in 0..8 {
                let want = if exact <= k { exact } else { k + 1 };
                assert_eq!(levenshtein_bounded(a, b, k), want, "{a} {b} k={k}");
                assert_eq!(my.distance(&bc, k), want, "myers {a} {b} k={k}");
            }
        }
    }

    #[test]
    fn lcsr_examples() {
        assert_eq!(lcsr("abc", "abc").unwrap(), 1.0);
        assert!((lcsr("abc", "abd").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lcsr("a", "b").unwrap(), 0.0);
        assert!(matches!(lcsr("", ""), Err(EvalError::BothEmpty)));
    }

    #[test]
    fn bi_sim_examples() {
        assert_eq!(bi_sim("abc", "abc").unwrap(), 1.0);
        assert_eq!(bi_sim("a", "a").unwrap(), 1.0);
        assert_eq!(bi_sim("a", "b").unwrap(), 0.5);
        assert_eq!(bi_sim("", "ab").unwrap(), 0.0);
        assert!(bi_sim("ab", "ba").unwrap() < 1.0);
    }

    #[test]
    fn dist_n_examples() {
        assert_eq!(dist_n(&ws(&["a b c"]), 1, DistNorm::NgramCount).unwrap(), 1.0);
        assert_eq!(dist_n(&ws(&["a a a a"]), 1, DistNorm::NgramCount).unwrap(), 0.25);
        assert_eq!(dist_n(&ws(&["a b", "a b"]), 2, DistNorm::NgramCount).unwrap(), 0.5);
        assert_eq!(dist_n(&ws(&["a b", "a b"]), 2, DistNorm::TokenCount).unwrap(), 0.25);
        assert!(matches!(dist_n(&ws(&["a"]), 2, DistNorm::NgramCount), Err(EvalError::NoNgrams)));
    }
}
