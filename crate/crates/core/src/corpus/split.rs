use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Script};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, attribute, test)
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: (0.8, 0.1, 0.1), seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<Script>,
    pub attribute: Vec<Script>,
    pub test: Vec<Script>,
}

/// Partition scripts by id into train/attribute/test.
///
/// Ids are sorted, shuffled with a seeded ChaCha8 stream and cut by rounded
/// fractions, so the result does not depend on input order.
pub fn split(corpus: Vec<Script>, spec: &SplitSpec) -> Result<Split, CorpusError> {
    let (a, b, c) = spec.fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidSplit(format!("({a}, {b}, {c})")));
    }
    let mut ids: Vec<String> = corpus.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 3 {
        return Err(CorpusError::TooFewScripts(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_attr = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let bucket = |id: &str| {
        let pos = ids.iter().position(|x| x == id).expect("id present");
        if pos < n_train {
            0
        } else if pos < n_train + n_attr {
            1
        } else {
            2
        }
    };

    let mut out = Split::default();
    let mut tagged: Vec<(usize, usize, Script)> = corpus
        .into_iter()
        .map(|s| {
            let pos = ids.iter().position(|x| *x == s.id).unwrap();
            (bucket(&s.id), pos, s)
        })
        .collect();
    tagged.sort_by_key(|(b, pos, _)| (*b, *pos));
    for (b, _, s) in tagged {
        match b {
            0 => out.train.push(s),
            1 => out.attribute.push(s),
            _ => out.test.push(s),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_script;

    fn corpus(n: usize) -> Vec<Script> {
        (0..n)
            .map(|i| {
                let mut s = parse_script(&format!("AL: line {i}.\n(cue {i}.)")).unwrap();
                s.id = format!("s{i:02}");
                s
            })
            .collect()
    }

    fn ids(v: &[Script]) -> Vec<String> {
        v.iter().map(|s| s.id.clone()).collect()
    }

    #[test]
    fn exact_fractions() {
        let out = split(corpus(10), &SplitSpec::default()).unwrap();
        assert_eq!((out.train.len(), out.attribute.len(), out.test.len()), (8, 1, 1));
        let mut all: Vec<String> = [ids(&out.train), ids(&out.attribute), ids(&out.test)].concat();
        all.sort();
        assert_eq!(all, ids(&corpus(10)));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let a = split(corpus(10), &SplitSpec::default()).unwrap();
        let mut rev = corpus(10);
        rev.reverse();
        let b = split(rev, &SplitSpec::default()).unwrap();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let c = split(corpus(10), &SplitSpec { seed: 7, ..Default::default() }).unwrap();
        assert_eq!(c.train.len(), 8);
    }

    #[test]
    fn errors() {
        assert!(matches!(split(corpus(2), &SplitSpec::default()), Err(CorpusError::TooFewScripts(2))));
        let bad = SplitSpec { fractions: (0.5, 0.5, 0.5), seed: 0 };
        assert!(matches!(split(corpus(5), &bad), Err(CorpusError::InvalidSplit(_))));
    }
}
