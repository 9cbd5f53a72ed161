use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::metrics::{banded, levenshtein_chars, MyersPattern};
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Neighbor {
    pub distance: usize,
    pub index: usize,
}

/// Reference strings prepared for repeated nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    texts: Vec<String>,
    chars: Vec<Vec<char>>,
    /// Reference indices sorted by (char length, index).
    by_len: Vec<usize>,
}

impl ReferenceIndex {
    pub fn new(texts: Vec<String>) -> Self {
        let chars: Vec<Vec<char>> = texts.iter().map(|t| t.chars().collect()).collect();
        let mut by_len: Vec<usize> = (0..texts.len()).collect();
        by_len.sort_by_key(|&i| (chars[i].len(), i));
        ReferenceIndex { texts, chars, by_len }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn chars(&self, i: usize) -> &[char] {
        &self.chars[i]
    }
}

/// Full scan: exact distance to every reference, sorted by
/// (distance, index).
pub fn nearest_cues_naive(sample: &str, refs: &ReferenceIndex, top_r: usize) -> Result<Vec<Neighbor>, EvalError> {
    if refs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let s: Vec<char> = sample.chars().collect();
    let mut all: Vec<Neighbor> =
        (0..refs.len()).map(|index| Neighbor { distance: levenshtein_chars(&s, refs.chars(index)), index }).collect();
    all.sort();
    all.truncate(top_r);
    Ok(all)
}

/// The `top_r` references closest to `sample` in edit distance, ties by
/// reference index. Same result as [`nearest_cues_naive`].
///
/// References are visited in order of increasing length difference, which
/// is a lower bound on the distance; the scan stops once that bound exceeds
/// the current r-th best, and each candidate is evaluated with an early-exit
/// bound equal to the r-th best.
pub fn nearest_cues(sample: &str, refs: &ReferenceIndex, top_r: usize) -> Result<Vec<Neighbor>, EvalError> {
    if refs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    if top_r == 0 {
        return Ok(Vec::new());
    }
    let s: Vec<char> = sample.chars().collect();
    let myers = MyersPattern::new(&s);
    let len = s.len();
    let order = &refs.by_len;
    // first position whose length is >= len
    let split = order.partition_point(|&i| refs.chars(i).len() < len);
    let (mut lo, mut hi) = (split, split); // next candidates: order[lo - 1] going down, order[hi] going up
    // max-heap of the best r so far; the top is the current r-th best
    let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(top_r + 1);

    loop {
        let down = (lo > 0).then(|| len - refs.chars(order[lo - 1]).len());
        let up = (hi < order.len()).then(|| refs.chars(order[hi]).len() - len);
        let (gap, idx) = match (down, up) {
            (None, None) => break,
            (Some(d), Some(u)) if d <= u => {
                lo -= 1;
                (d, order[lo])
            }
            (Some(d), None) => {
                lo -= 1;
                (d, order[lo])
            }
            (_, Some(u)) => {
                hi += 1;
                (u, order[hi - 1])
            }
        };
        let full = heap.len() == top_r;
        let bound = if full { heap.peek().unwrap().distance } else { usize::MAX };
        if full && gap > bound {
            // every remaining candidate has at least this gap
            break;
        }
        let k = if full { bound } else { len.max(refs.chars(idx).len()) };
        let d = match &myers {
            Some(m) => m.distance(refs.chars(idx), k),
            None => banded(&s, refs.chars(idx), k),
        };
        let cand = Neighbor { distance: d, index: idx };
        if !full {
            heap.push(cand);
        } else if d <= bound && cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
    }
    let mut out = heap.into_vec();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_ranks_first() {
        let refs = ReferenceIndex::new(vec!["(He exits.)".into(), "(She sits.)".into(), "(Dark.)".into()]);
        let n = nearest_cues("(She sits.)", &refs, 1).unwrap();
        assert_eq!(n, vec![Neighbor { distance: 0, index: 1 }]);
        let all = nearest_cues("(x)", &refs, 3).unwrap();
        assert_eq!(all, nearest_cues_naive("(x)", &refs, 3).unwrap());
        assert!(all.windows(2).all(|w| w[0] <= w[1]));
        assert!(matches!(nearest_cues("a", &ReferenceIndex::new(vec![]), 1), Err(EvalError::EmptyReferences)));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let refs = ReferenceIndex::new(vec!["abcd".into(), "ab".into(), "abc".into(), "abx".into()]);
        let n = nearest_cues("abz", &refs, 2).unwrap();
        assert_eq!(n, nearest_cues_naive("abz", &refs, 2).unwrap());
        assert_eq!(n[0].index, 1);
    }
}
