use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::graph::Graph;
use super::model::{LMConfig, LanguageModel, ModelInput};
use super::tensor::{Scalar, Tensor};
use super::tokenizer::{Vocab, BOS, EOS};
use super::ModelError;
use crate::corpus::Script;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub steps: usize,
    pub lr: f64,
    /// Windows per step.
    pub batch: usize,
    pub seed: u64,
    /// Tail fraction of the token stream held out for validation.
    pub val_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub warmup: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { steps: 500, lr: 3e-3, batch: 8, seed: 0, val_fraction: 0.1, clip: 1.0, warmup: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub val_perplexity: f64,
    /// Perplexity of the uniform distribution, i.e. the vocabulary size.
    pub uniform_perplexity: f64,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub seconds: f64,
}

/// One `BOS … EOS` id sequence per scene, lines in order.
pub fn scene_sequences(scripts: &[Script], vocab: &Vocab) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for script in scripts {
        for scene in &script.scenes {
            let mut seq = vec![BOS];
            for line in &scene.lines {
                seq.extend(vocab.encode(&line.model_text()));
            }
            seq.push(EOS);
            out.push(seq);
        }
    }
    out
}

/// Mean next-token cross-entropy over `windows` and its parameter gradients.
/// Windows are processed in parallel; gradients are summed in window order,
/// so the result does not depend on the thread count.
pub fn loss_and_grads<T: Scalar>(
    model: &LanguageModel<T>,
    windows: &[&[usize]],
) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
    let per: Vec<(f64, Vec<Tensor<T>>)> = windows
        .par_iter()
        .map(|w| {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let out = model.forward_graph(&mut g, &p, ModelInput::Tokens(&w[..w.len() - 1]), None, 0)?;
            let loss = g.cross_entropy(out.logits, &w[1..]);
            let mut grads = g.backward(loss);
            let gs = p
                .iter()
                .zip(&model.params)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
                .collect();
            Ok((g.scalar(loss).f(), gs))
        })
        .collect::<Result<_, ModelError>>()?;
    let n = per.len().max(1) as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut acc) = iter.next().ok_or(ModelError::EmptyCorpus)?;
    for (l, gs) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&gs) {
            a.add_assign(b);
        }
    }
    let inv = T::from_f(1.0 / n);
    for a in acc.iter_mut() {
        a.data.iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((loss / n, acc))
}

struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.98;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor<T>]) -> Self {
        let z = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Adam { m: z(), v: z(), t: 0 }
    }

    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i].f();
                let mi = Self::B1 * m.data[i].f() + (1.0 - Self::B1) * gi;
                let vi = Self::B2 * v.data[i].f() + (1.0 - Self::B2) * gi * gi;
                m.data[i] = T::from_f(mi);
                v.data[i] = T::from_f(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
                p.data[i] = T::from_f(p.data[i].f() - upd);
            }
        }
    }
}

/// Loss above which a step counts as diverged even if still finite: ten
/// times the loss of a uniform predictor.
fn divergence_bound(vocab_size: usize) -> f64 {
    10.0 * (vocab_size as f64).ln()
}

/// Train a fresh model on `sequences` (each `BOS … EOS`).
///
/// The sequences are concatenated into one stream; the tail
/// `val_fraction` of it is held out. Every step draws `batch` random
/// windows of `context + 1` tokens from the rest.
pub fn train_lm<T: Scalar>(
    sequences: &[Vec<usize>],
    vocab: &Vocab,
    config: LMConfig,
    hyper: &TrainHyper,
) -> Result<(Checkpoint<T>, TrainReport), ModelError> {
    config.validate()?;
    if config.vocab_size != vocab.len() {
        return Err(ModelError::InvalidConfig(format!(
            "vocab_size {} but vocabulary has {} entries",
            config.vocab_size,
            vocab.len()
        )));
    }
    if hyper.batch == 0 || !(0.0..1.0).contains(&hyper.val_fraction) || !(hyper.lr > 0.0) {
        return Err(ModelError::InvalidConfig("batch must be positive, val_fraction in [0,1), lr > 0".into()));
    }
    let stream: Vec<usize> = sequences.iter().flatten().copied().collect();
    if let Some(&bad) = stream.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::InvalidToken(bad));
    }
    let n_val = if hyper.val_fraction > 0.0 {
        ((stream.len() as f64 * hyper.val_fraction).round() as usize).max(2)
    } else {
        0
    };
    if stream.len() < n_val + 2 {
        return Err(ModelError::EmptyCorpus);
    }
    let (train, val) = stream.split_at(stream.len() - n_val);
    let start = Instant::now();

    let mut model = LanguageModel::<T>::new(config)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let w = (config.context + 1).min(train.len());
    let bound = divergence_bound(config.vocab_size);
    let mut losses = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let windows: Vec<&[usize]> = (0..hyper.batch)
            .map(|_| {
                let s = rng.random_range(0..=train.len() - w);
                &train[s..s + w]
            })
            .collect();
        let (loss, mut grads) = loss_and_grads(&model, &windows)?;
        let finite = grads.iter().all(Tensor::all_finite);
        if !loss.is_finite() || !finite || loss > bound {
            return Err(ModelError::DivergedLoss { step, loss });
        }
        let norm = grads.iter().map(|g| g.data.iter().map(|x| x.f() * x.f()).sum::<f64>()).sum::<f64>().sqrt();
        if hyper.clip > 0.0 && norm > hyper.clip {
            let s = T::from_f(hyper.clip / norm);
            grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x = *x * s));
        }
        let lr = if step < hyper.warmup { hyper.lr * (step + 1) as f64 / hyper.warmup as f64 } else { hyper.lr };
        adam.step(&mut model.params, &grads, lr);
        if step % 50 == 0 || step + 1 == hyper.steps {
            log::info!("step {step} loss {loss:.4} grad_norm {norm:.3}");
        }
        losses.push(loss);
    }

    let val_perplexity = perplexity(&model, if val.len() >= 2 { val } else { train })?;
    let report = TrainReport {
        losses,
        val_perplexity,
        uniform_perplexity: config.vocab_size as f64,
        train_tokens: train.len(),
        val_tokens: val.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    let checkpoint =
        Checkpoint { model, vocab: vocab.clone(), step: hyper.steps as u64, rng: RngState::of(hyper.seed, &rng) };
    Ok((checkpoint, report))
}

/// Perplexity over a token stream, scored in consecutive context-sized
/// windows (each window conditions only on its own tokens).
fn perplexity<T: Scalar>(model: &LanguageModel<T>, stream: &[usize]) -> Result<f64, ModelError> {
    let t = model.config.context;
    let starts: Vec<usize> = (0..stream.len() - 1).step_by(t).collect();
    let parts = starts
        .par_iter()
        .map(|&s| model.nll(&stream[s..(s + t + 1).min(stream.len())], 1))
        .collect::<Result<Vec<_>, _>>()?;
    let (nll, n) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok((nll / n.max(1) as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::train_tokenizer;

    fn toy() -> (Vocab, Vec<Vec<usize>>) {
        let lines: Vec<String> = (0..60)
            .map(|i| if i % 2 == 0 { format!("( he walks to door {} . )", i % 5) } else { "i am here now".into() })
            .collect();
        let vocab = train_tokenizer(lines.iter().map(String::as_str), 100).unwrap();
        let seqs = lines
            .chunks(4)
            .map(|c| {
                let mut s = vec![BOS];
                c.iter().for_each(|l| s.extend(vocab.encode(l)));
                s.push(EOS);
                s
            })
            .collect();
        (vocab, seqs)
    }

    fn cfg(v: usize) -> LMConfig {
        LMConfig { layers: 1, heads: 2, d_model: 16, context: 16, vocab_size: v, d_ff: 32, seed: 2 }
    }

    #[test]
    fn zero_steps_is_initialization() {
        let (vocab, seqs) = toy();
        let hyper = TrainHyper { steps: 0, ..Default::default() };
        let (ck, report) = train_lm::<f32>(&seqs, &vocab, cfg(vocab.len()), &hyper).unwrap();
        assert_eq!(ck.model, LanguageModel::new(cfg(vocab.len())).unwrap());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn learns_and_is_deterministic() {
        let (vocab, seqs) = toy();
        let hyper = TrainHyper { steps: 60, lr: 1e-2, ..Default::default() };
        let (a, ra) = train_lm::<f32>(&seqs, &vocab, cfg(vocab.len()), &hyper).unwrap();
        let (b, _) = train_lm::<f32>(&seqs, &vocab, cfg(vocab.len()), &hyper).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(ra.val_perplexity < ra.uniform_perplexity / 2.0, "{ra:?}");
        assert!(ra.losses.last().unwrap() < &ra.losses[0]);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (vocab, seqs) = toy();
        let hyper = TrainHyper { steps: 50, lr: 1e3, warmup: 0, ..Default::default() };
        let err = train_lm::<f32>(&seqs, &vocab, cfg(vocab.len()), &hyper).unwrap_err();
        assert!(matches!(err, ModelError::DivergedLoss { .. }), "{err:?}");
    }

    #[test]
    fn rejects_mismatched_vocab() {
        let (vocab, seqs) = toy();
        let r = train_lm::<f32>(&seqs, &vocab, cfg(vocab.len() + 1), &TrainHyper::default());
        assert!(matches!(r, Err(ModelError::InvalidConfig(_))));
    }
}
