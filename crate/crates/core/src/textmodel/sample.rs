use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::LanguageModel;
use super::tensor::Scalar;
use super::tokenizer::EOS;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleParams {
    /// 0 means the whole vocabulary.
    pub top_k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams { top_k: 10, temperature: 1.0, max_len: 40, seed: 0 }
    }
}

/// Softmax of `logits / temperature` in f64. A non-positive temperature
/// gives the one-hot argmax.
pub fn token_distribution<T: Scalar>(logits: &[T], temperature: f64) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|x| x.f()).collect();
    if temperature <= 0.0 {
        let best = argmax(&out);
        out.iter_mut().enumerate().for_each(|(i, x)| *x = if i == best { 1.0 } else { 0.0 });
        return out;
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in out.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw from the `top_k` most probable entries of `probs` (renormalized)
/// using the uniform variate `u ∈ [0, 1)`. Ties rank the smaller id first.
pub fn pick_top_k(probs: &[f64], top_k: usize, u: f64) -> usize {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let k = if top_k == 0 { probs.len() } else { top_k.min(probs.len()) };
    if k < probs.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        idx.truncate(k);
    }
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let total: f64 = idx.iter().map(|&i| probs[i]).sum();
    let target = u * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += probs[i];
        if acc > target {
            return i;
        }
    }
    idx[0]
}

/// Top-k sampling continuation of `prefix`. Stops at EOS (not included),
/// `max_len` tokens, or when the context is full.
pub fn sample<T: Scalar>(
    model: &LanguageModel<T>,
    prefix: &[usize],
    params: &SampleParams,
) -> Result<Vec<usize>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let limit = model.config.context;
    if prefix.len() > limit {
        return Err(ModelError::ContextOverflow { needed: prefix.len(), limit });
    }
    let mut out = Vec::new();
    if params.max_len == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // same schedule as steered generation: the last prefix token is fed alone
    let n = prefix.len();
    let head = if n > 1 { Some(model.forward_full(&prefix[..n - 1], None)?.2) } else { None };
    let (mut logits, mut past) = model.lm_forward(&prefix[n - 1..], head.as_ref())?;
    loop {
        let probs = token_distribution(&logits, params.temperature);
        let tok = pick_top_k(&probs, params.top_k, rng.random::<f64>());
        if tok == EOS {
            break;
        }
        out.push(tok);
        if out.len() >= params.max_len || past.len() >= limit {
            break;
        }
        (logits, past) = model.lm_forward(&[tok], Some(&past))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::LMConfig;

    #[test]
    fn picker_respects_top_k() {
        let p = [0.1, 0.4, 0.2, 0.3];
        for i in 0..100 {
            let u = i as f64 / 100.0;
            assert_eq!(pick_top_k(&p, 1, u), 1);
            assert!([1, 3].contains(&pick_top_k(&p, 2, u)));
        }
        assert_eq!(pick_top_k(&p, 0, 0.999), 0);
        assert_eq!(pick_top_k(&[0.5, 0.5], 1, 0.9), 0);
    }

    #[test]
    fn distribution_normalizes() {
        let d = token_distribution(&[1.0f32, 2.0, 3.0], 0.5);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(token_distribution(&[1.0f32, 3.0, 2.0], 0.0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn greedy_is_seed_independent() {
        let cfg = LMConfig { layers: 1, heads: 2, d_model: 16, context: 12, vocab_size: 30, d_ff: 32, seed: 5 };
        let m = LanguageModel::<f32>::new(cfg).unwrap();
        let base = SampleParams { top_k: 1, max_len: 8, ..Default::default() };
        let a = sample(&m, &[0, 4], &base).unwrap();
        let b = sample(&m, &[0, 4], &SampleParams { seed: 99, ..base }).unwrap();
        assert_eq!(a, b);
        assert!(sample(&m, &[0, 4], &SampleParams { max_len: 0, ..base }).unwrap().is_empty());
        let long = sample(&m, &[0; 10], &SampleParams { top_k: 0, max_len: 100, ..base }).unwrap();
        assert!(long.len() <= 3);
        assert!(matches!(sample(&m, &[0; 13], &base), Err(ModelError::ContextOverflow { .. })));
    }
}
