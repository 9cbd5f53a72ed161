use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perturb::{perturb_past, PoolContext};
use super::{fuse, AttributeTarget, SteerError, SteeringParams, StepRecord, StepTrace};
use crate::textmodel::{
    pick_top_k, token_distribution, Checkpoint, LanguageModel, ModelError, PastState, Scalar, BOS, EOS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeredOutput {
    /// Generated ids, without the prefix or EOS.
    pub tokens: Vec<usize>,
    pub text: String,
    pub trace: StepTrace,
}

/// Steered continuation of `prefix` (encoded after a leading BOS).
pub fn generate_steered<T: Scalar>(
    ck: &Checkpoint<T>,
    prefix: &str,
    target: AttributeTarget<'_>,
    params: &SteeringParams,
) -> Result<SteeredOutput, SteerError> {
    let mut ids = vec![BOS];
    ids.extend(ck.vocab.encode(prefix));
    let (tokens, trace) = generate_steered_ids(&ck.model, &ids, target, params)?;
    Ok(SteeredOutput { text: ck.vocab.decode(&tokens), tokens, trace })
}

/// Token-level steering loop: unmodified forward → perturb the past →
/// modified forward → fuse → top-k sample.
///
/// Two pasts are kept: the unperturbed one, which defines the reference
/// distribution, and the steered one, which carries earlier perturbations
/// forward. With `alpha = 0` both coincide and the output equals
/// [`crate::textmodel::sample`] for the same seed.
pub fn generate_steered_ids<T: Scalar>(
    lm: &LanguageModel<T>,
    prefix: &[usize],
    target: AttributeTarget<'_>,
    params: &SteeringParams,
) -> Result<(Vec<usize>, StepTrace), SteerError> {
    params.validate()?;
    let cfg = &lm.config;
    target.validate(cfg.d_model, cfg.vocab_size)?;
    let n = prefix.len();
    if n == 0 {
        return Err(ModelError::EmptyInput.into());
    }
    if n > cfg.context {
        return Err(ModelError::ContextOverflow { needed: n, limit: cfg.context }.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut past_u = if n > 1 { lm.forward_full(&prefix[..n - 1], None)?.2 } else { PastState::empty(cfg) };
    let mut past_s = past_u.clone();
    let mut last = prefix[n - 1];
    let mut pool = PoolContext::empty(cfg.d_model);
    let mut out = Vec::new();
    let mut trace = StepTrace::default();

    while out.len() < params.max_len && past_u.len() < cfg.context {
        let (logits_u, hidden_u, next_u) = lm.forward_full(&[last], Some(&past_u))?;
        let logits_u = logits_u.row(0);
        pool.include_last = !out.is_empty();

        let (p_mod, next_s, mut record) = match perturb_past(lm, &past_s, last, target, params, logits_u, &pool) {
            Ok(o) => {
                let delta_norms = o
                    .delta
                    .keys
                    .iter()
                    .zip(&o.delta.values)
                    .map(|(k, v)| (k.norm().f().powi(2) + v.norm().f().powi(2)).sqrt())
                    .collect();
                let record = StepRecord {
                    token: 0,
                    loss_before: o.iteration_losses[0],
                    loss_after: *o.iteration_losses.last().unwrap(),
                    iteration_losses: o.iteration_losses,
                    kl: o.kl,
                    delta_norms,
                    fallback: false,
                };
                (token_distribution(&o.logits, params.temperature), o.present, record)
            }
            Err(SteerError::NonFiniteGradient) => {
                log::warn!("non-finite steering gradient at step {}; using the unmodified distribution", out.len());
                let (logits, _, present) = lm.forward_full(&[last], Some(&past_s))?;
                let record = StepRecord {
                    token: 0,
                    loss_before: f64::NAN,
                    loss_after: f64::NAN,
                    iteration_losses: Vec::new(),
                    kl: 0.0,
                    delta_norms: vec![0.0; cfg.layers],
                    fallback: true,
                };
                (token_distribution(logits.row(0), params.temperature), present, record)
            }
            Err(e) => return Err(e),
        };
        let p_u = token_distribution(logits_u, params.temperature);
        let fused = fuse(&p_mod, &p_u, params.gm_scale)?;
        let tok = pick_top_k(&fused, params.top_k, rng.random::<f64>());

        if pool.include_last {
            pool.push(&hidden_u.row(0).iter().map(|x| x.f()).collect::<Vec<_>>());
        }
        past_u = next_u;
        past_s = next_s;
        if tok == EOS {
            break;
        }
        record.token = tok;
        trace.steps.push(record);
        out.push(tok);
        last = tok;
    }
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::{BowAttribute, BowSource, HeadMode, LinearHead};
    use crate::steering::{steering_loss, AttributeModel};
    use crate::textmodel::{sample, LMConfig, SampleParams, Tensor, Vocab};

    fn setup() -> (LanguageModel<f64>, Vocab) {
        let vocab = Vocab::from_words((0..20).map(|i| format!("w{i}")));
        let cfg = LMConfig { layers: 2, heads: 2, d_model: 16, context: 24, vocab_size: vocab.len(), d_ff: 32, seed: 7 };
        (LanguageModel::new(cfg).unwrap(), vocab)
    }

    fn head(d: usize) -> AttributeModel {
        let mut h = LinearHead::zeros(vec!["dialogue".into(), "cue".into()], HeadMode::Softmax, d);
        h.weights.data.iter_mut().enumerate().for_each(|(i, w)| *w = ((i % 7) as f64 - 3.0) * 0.3);
        AttributeModel::Head(h)
    }

    #[test]
    fn zero_alpha_matches_plain_sampling() {
        let (lm, _) = setup();
        let attr = head(16);
        let target = AttributeTarget { model: &attr, class: 1 };
        for seed in 0..5 {
            let params = SteeringParams { alpha: 0.0, max_len: 10, seed, gm_scale: 0.6, ..Default::default() };
            let (steered, trace) = generate_steered_ids(&lm, &[BOS, 5, 6], target, &params).unwrap();
            let plain = sample(&lm, &[BOS, 5, 6], &SampleParams { top_k: 10, temperature: 1.0, max_len: 10, seed }).unwrap();
            assert_eq!(steered, plain);
            assert_eq!(trace.len(), steered.len());
            assert!(trace.steps.iter().all(|s| s.kl == 0.0 && s.delta_norms.iter().all(|&n| n == 0.0)));
        }
    }

    #[test]
    fn whole_vocab_bag_leaves_past_untouched() {
        let (lm, vocab) = setup();
        let words: Vec<&str> = vocab.tokens().iter().map(String::as_str).collect();
        let attr = AttributeModel::Bow(BowAttribute::new(0, &words, &vocab, BowSource::Manual).unwrap());
        let (_, _, past) = lm.forward_full(&[BOS, 4, 9], None).unwrap();
        let (logits, _) = lm.lm_forward(&[3], Some(&past)).unwrap();
        let o = perturb_past(
            &lm,
            &past,
            3,
            AttributeTarget { model: &attr, class: 0 },
            &SteeringParams::default(),
            &logits,
            &PoolContext::empty(16),
        )
        .unwrap();
        assert!(o.delta.keys.iter().chain(&o.delta.values).all(|t| t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn delta_gradient_matches_finite_differences() {
        let (lm, _) = setup();
        let attr = head(16);
        let target = AttributeTarget { model: &attr, class: 1 };
        let (_, _, past) = lm.forward_full(&[BOS, 4, 9, 11], None).unwrap();
        let (logits, _) = lm.lm_forward(&[3], Some(&past)).unwrap();
        let params = SteeringParams { kl_scale: 0.5, horizon: 2, ..Default::default() };
        let mut pool = PoolContext::empty(16);
        pool.push(&[0.1; 16]);
        pool.include_last = true;
        let mut delta = past.zeros_like();
        delta.keys.iter_mut().chain(delta.values.iter_mut()).enumerate().for_each(|(j, t)| {
            t.data.iter_mut().enumerate().for_each(|(i, x)| *x = (((i * 13 + j * 5) % 17) as f64 - 8.0) * 0.01)
        });
        let (_, grads) = steering_loss(&lm, &past, &delta, 3, target, &params, &logits, &pool).unwrap();
        let h = 1e-6;
        for layer in 0..2 {
            for i in [0, 5, 17, 40] {
                let mut plus = delta.clone();
                plus.values[layer].data[i] += h;
                let mut minus = delta.clone();
                minus.values[layer].data[i] -= h;
                let lp = steering_loss(&lm, &past, &plus, 3, target, &params, &logits, &pool).unwrap().0;
                let lm_ = steering_loss(&lm, &past, &minus, 3, target, &params, &logits, &pool).unwrap().0;
                let fd = (lp - lm_) / (2.0 * h);
                let an = grads.values[layer].data[i];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "layer {layer} i {i}: {fd} vs {an}");
            }
        }
        let _ = Tensor::<f64>::zeros(1, 1);
    }
}
