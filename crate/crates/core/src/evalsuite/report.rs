use std::sync::OnceLock;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::metrics::{bi_sim_chars, dist_n, lcsr_chars, DistNorm};
use super::search::{nearest_cues, ReferenceIndex};
use super::EvalError;
use crate::corpus::preprocess;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_samples: usize,
    pub reference_size: usize,
    pub top_r: usize,
    pub seed: u64,
    pub dist_norm: DistNorm,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { num_samples: 600, reference_size: 50_000, top_r: 10, seed: 0, dist_norm: DistNorm::NgramCount }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.num_samples == 0 || self.reference_size == 0 || self.top_r == 0 {
            return Err(EvalError::InvalidConfig("num_samples, reference_size and top_r must be positive".into()));
        }
        if self.top_r > self.reference_size {
            return Err(EvalError::InvalidConfig("top_r exceeds reference_size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNeighbor {
    pub index: usize,
    pub distance: usize,
    pub lcsr: f64,
    pub bi_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub text: String,
    pub normalized: String,
    pub neighbors: Vec<ScoredNeighbor>,
    pub lcsr: f64,
    pub bi_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub generation_seconds: f64,
    pub search_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generator: String,
    pub num_samples: usize,
    pub reference_size: usize,
    pub top_r: usize,
    pub seed: u64,
    pub mean_lcsr: f64,
    pub mean_bi_sim: f64,
    /// Dist-1, Dist-2, Dist-3.
    pub dist: [f64; 3],
    pub dist_normalization: DistNorm,
    pub samples: Vec<SampleResult>,
    pub runtime: RuntimeStats,
}

impl EvalReport {
    /// One row in the layout of the paper-style results table.
    pub fn table(reports: &[&EvalReport]) -> String {
        let width = reports.iter().map(|r| r.generator.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "Model", "LCSR", "BI-SIM", "Dist-1", "Dist-2", "Dist-3"
        );
        for r in reports {
            s.push_str(&format!(
                "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}\n",
                r.generator, r.mean_lcsr, r.mean_bi_sim, r.dist[0], r.dist[1], r.dist[2]
            ));
        }
        s
    }
}

fn speaker_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*[A-Z][A-Z'.]*(?:\s+[A-Z][A-Z'.]*){0,3}\s*[.:]\s+").unwrap())
}

/// Form compared by the similarity metrics: speaker prefix removed,
/// punctuation spaced out, lowercased.
pub fn normalize_for_eval(text: &str) -> String {
    let stripped = speaker_prefix().replace(text, "");
    preprocess(&stripped).to_lowercase()
}

/// `size` references drawn uniformly without replacement, in source order.
pub fn sample_references(cues: &[String], size: usize, seed: u64) -> Vec<String> {
    if size >= cues.len() {
        return cues.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cues.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cues[i].clone()).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Generate `num_samples` texts, score each against its `top_r` nearest
/// references and compute diversity over all samples.
///
/// `generator` is called with the sample index. References are used as
/// given; draw them with [`sample_references`] beforehand if needed.
pub fn run_eval<F, E>(
    name: &str,
    mut generator: F,
    references: &[String],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError>
where
    F: FnMut(usize) -> Result<String, E>,
    E: std::fmt::Display,
{
    config.validate()?;
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let top_r = config.top_r.min(references.len());
    let t0 = Instant::now();
    let texts = (0..config.num_samples)
        .map(|i| generator(i).map_err(|e| EvalError::Generator(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let generation_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let index = ReferenceIndex::new(references.iter().map(|r| normalize_for_eval(r)).collect());
    let samples = texts
        .into_par_iter()
        .map(|text| {
            let normalized = normalize_for_eval(&text);
            let sc: Vec<char> = normalized.chars().collect();
            let neighbors = nearest_cues(&normalized, &index, top_r)?
                .into_iter()
                .map(|n| {
                    let rc = index.chars(n.index);
                    let (lcsr, bi_sim) = if sc.is_empty() && rc.is_empty() {
                        (1.0, 1.0)
                    } else {
                        (lcsr_chars(&sc, rc)?, bi_sim_chars(&sc, rc)?)
                    };
                    Ok(ScoredNeighbor { index: n.index, distance: n.distance, lcsr, bi_sim })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            let lcsr = mean(neighbors.iter().map(|n| n.lcsr));
            let bi_sim = mean(neighbors.iter().map(|n| n.bi_sim));
            Ok(SampleResult { text, normalized, neighbors, lcsr, bi_sim })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let search_seconds = t1.elapsed().as_secs_f64();

    let token_lists: Vec<Vec<&str>> = samples.iter().map(|s| s.normalized.split_whitespace().collect()).collect();
    let mut dist = [0.0; 3];
    for (n, d) in dist.iter_mut().enumerate() {
        // too-short samples simply contribute no n-grams; no n-grams at all scores 0
        *d = match dist_n(&token_lists, n + 1, config.dist_norm) {
            Ok(v) => v,
            Err(EvalError::NoNgrams) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(EvalReport {
        generator: name.to_string(),
        num_samples: config.num_samples,
        reference_size: references.len(),
        top_r,
        seed: config.seed,
        mean_lcsr: mean(samples.iter().map(|s| s.lcsr)),
        mean_bi_sim: mean(samples.iter().map(|s| s.bi_sim)),
        dist,
        dist_normalization: config.dist_norm,
        samples,
        runtime: RuntimeStats { generation_seconds, search_seconds },
    })
}
