use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AttrError;
use crate::container::{Container, RawTensor};
use crate::textmodel::{Graph, LanguageModel, Scalar, Tensor, Var, Vocab, BOS};

pub const HEAD_KIND: &str = "cuegen.head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Mutually exclusive classes.
    Softmax,
    /// Independent labels.
    Sigmoid,
}

/// Single linear layer over mean-pooled final hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub classes: Vec<String>,
    pub mode: HeadMode,
    /// `[classes × d]`
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    /// One label in softmax mode, any number in sigmoid mode.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadHyper {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper { epochs: 300, lr: 0.05, l2: 1e-4, holdout_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub train_examples: usize,
    pub holdout_examples: usize,
    pub train_accuracy: f64,
    /// Equal to `train_accuracy` when nothing was held out.
    pub holdout_accuracy: f64,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearHead {
    pub fn zeros(classes: Vec<String>, mode: HeadMode, d: usize) -> Self {
        let c = classes.len();
        LinearHead { classes, mode, weights: Tensor::zeros(c, d), bias: vec![0.0; c] }
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), AttrError> {
        if x.len() != self.dim() {
            return Err(AttrError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, AttrError> {
        self.check_dim(x)?;
        Ok((0..self.num_classes())
            .map(|c| self.bias[c] + self.weights.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// `log p(class | x)` for every class.
    pub fn log_probs(&self, x: &[f64]) -> Result<Vec<f64>, AttrError> {
        let z = self.logits(x)?;
        Ok(match self.mode {
            HeadMode::Softmax => crate::textmodel::tensor::log_softmax(&z),
            HeadMode::Sigmoid => z.into_iter().map(log_sigmoid).collect(),
        })
    }

    /// Predicted class (softmax) or label set (sigmoid, probability ≥ 0.5).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>, AttrError> {
        let lp = self.log_probs(x)?;
        Ok(match self.mode {
            HeadMode::Softmax => {
                let mut best = 0;
                for (i, &v) in lp.iter().enumerate() {
                    if v > lp[best] {
                        best = i;
                    }
                }
                vec![best]
            }
            HeadMode::Sigmoid => (0..lp.len()).filter(|&i| lp[i] >= 0.5f64.ln()).collect(),
        })
    }

    /// `log p(target | x)` and its gradient with respect to `x`.
    pub fn log_prob(&self, x: &[f64], target: usize) -> Result<(f64, Vec<f64>), AttrError> {
        if target >= self.num_classes() {
            return Err(AttrError::LabelOutOfRange { label: target, classes: self.num_classes() });
        }
        let z = self.logits(x)?;
        // value and d/dz of the log-probability
        let (value, dz): (f64, Vec<f64>) = match self.mode {
            HeadMode::Softmax => {
                let lp = crate::textmodel::tensor::log_softmax(&z);
                let dz = lp.iter().enumerate().map(|(c, l)| (c == target) as u8 as f64 - l.exp()).collect();
                (lp[target], dz)
            }
            HeadMode::Sigmoid => {
                let dz = (0..z.len()).map(|c| if c == target { 1.0 - sigmoid(z[c]) } else { 0.0 }).collect();
                (log_sigmoid(z[target]), dz)
            }
        };
        Ok((value, self.pull_back(&dz)))
    }

    fn pull_back(&self, dz: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for (c, &d) in dz.iter().enumerate() {
            for (gi, w) in g.iter_mut().zip(self.weights.row(c)) {
                *gi += d * w;
            }
        }
        g
    }

    /// Graph form of [`LinearHead::log_prob`] for an `[1 × d]` input.
    pub fn log_prob_graph<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, target: usize) -> Var {
        let w = g.input(self.weights.cast(), false);
        let b = g.input(Tensor::from_vec(1, self.bias.len(), self.bias.iter().map(|&v| T::from_f(v)).collect()), false);
        let z = g.matmul_bt(x, w);
        let z = g.add_row(z, b);
        let lp = match self.mode {
            HeadMode::Softmax => g.log_softmax(z),
            HeadMode::Sigmoid => g.log_sigmoid(z),
        };
        g.select(lp, 0, target)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "classes": self.classes, "mode": self.mode });
        let mut c = Container::new(HEAD_KIND, meta);
        c.push(RawTensor::from_tensor("weights", &self.weights));
        c.push(RawTensor::from_tensor("bias", &Tensor::from_vec(1, self.bias.len(), self.bias.clone())));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, AttrError> {
        c.expect_kind(HEAD_KIND)?;
        #[derive(Deserialize)]
        struct Meta {
            classes: Vec<String>,
            mode: HeadMode,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| AttrError::Format(e.to_string()))?;
        let weights = c.tensor("weights")?.to_tensor::<f64>()?;
        let bias = c.tensor("bias")?.to_tensor::<f64>()?.data;
        if weights.rows != meta.classes.len() || bias.len() != meta.classes.len() {
            return Err(AttrError::Format("head tensors do not match class list".into()));
        }
        Ok(LinearHead { classes: meta.classes, mode: meta.mode, weights, bias })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AttrError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AttrError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Mean of the final hidden states over the text's tokens. The model sees
/// `BOS` first, which is not pooled. Long texts are truncated to the context.
pub fn text_features<T: Scalar>(lm: &LanguageModel<T>, vocab: &Vocab, text: &str) -> Result<Vec<f64>, AttrError> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids.truncate(lm.config.context);
    if ids.len() == 1 {
        // nothing but BOS: pool the BOS state itself
        return Ok(lm.pooled_hidden(&ids)?.iter().map(|x| x.f()).collect());
    }
    let (_, hidden, _) = lm.forward_full(&ids, None)?;
    let n = (hidden.rows - 1) as f64;
    Ok((0..hidden.cols).map(|c| (1..hidden.rows).map(|r| hidden.at(r, c).f()).sum::<f64>() / n).collect())
}

/// Train a head on frozen LM features. Only the head's parameters move.
pub fn train_head<T: Scalar>(
    data: &[LabeledText],
    lm: &LanguageModel<T>,
    vocab: &Vocab,
    classes: Vec<String>,
    mode: HeadMode,
    hyper: &HeadHyper,
) -> Result<(LinearHead, HeadReport), AttrError> {
    if data.is_empty() {
        return Err(AttrError::EmptyDataset);
    }
    let nc = classes.len();
    if nc == 0 {
        return Err(AttrError::InvalidParams("at least one class is required".into()));
    }
    for ex in data {
        if let Some(&bad) = ex.labels.iter().find(|&&l| l >= nc) {
            return Err(AttrError::LabelOutOfRange { label: bad, classes: nc });
        }
        if mode == HeadMode::Softmax && ex.labels.len() != 1 {
            return Err(AttrError::InvalidParams("softmax heads need exactly one label per example".into()));
        }
    }
    let features: Vec<Vec<f64>> =
        data.par_iter().map(|ex| text_features(lm, vocab, &ex.text)).collect::<Result<_, _>>()?;

    let mut warnings = Vec::new();
    let mut seen = vec![0usize; nc];
    data.iter().flat_map(|ex| &ex.labels).for_each(|&l| seen[l] += 1);
    let missing: Vec<&str> = (0..nc).filter(|&c| seen[c] == 0).map(|c| classes[c].as_str()).collect();
    if !missing.is_empty() {
        warnings.push(format!("no training examples for: {}", missing.join(", ")));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(hyper.seed));
    let n_hold = if data.len() >= 2 { (data.len() as f64 * hyper.holdout_fraction).round() as usize } else { 0 };
    let n_hold = n_hold.min(data.len() - 1);
    let (hold, train) = order.split_at(n_hold);
    if hold.is_empty() {
        warnings.push("holdout set is empty; reporting training accuracy".into());
    }

    let d = lm.config.d_model;
    let mut head = LinearHead::zeros(classes, mode, d);
    let mut final_loss = 0.0;
    // full-batch Adam on the convex head objective
    let np = nc * d + nc;
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    for epoch in 0..hyper.epochs {
        let mut grad = vec![0.0; np];
        let mut loss = 0.0;
        for &i in train {
            let x = &features[i];
            let z = head.logits(x)?;
            let dz: Vec<f64> = match mode {
                HeadMode::Softmax => {
                    let lp = crate::textmodel::tensor::log_softmax(&z);
                    let t = data[i].labels[0];
                    loss -= lp[t];
                    lp.iter().enumerate().map(|(c, l)| l.exp() - (c == t) as u8 as f64).collect()
                }
                HeadMode::Sigmoid => (0..nc)
                    .map(|c| {
                        let y = data[i].labels.contains(&c) as u8 as f64;
                        loss -= y * log_sigmoid(z[c]) + (1.0 - y) * log_sigmoid(-z[c]);
                        sigmoid(z[c]) - y
                    })
                    .collect(),
            };
            for c in 0..nc {
                for k in 0..d {
                    grad[c * d + k] += dz[c] * x[k];
                }
                grad[nc * d + c] += dz[c];
            }
        }
        let n = train.len() as f64;
        final_loss = loss / n;
        let t = (epoch + 1) as i32;
        for j in 0..np {
            let w = if j < nc * d { head.weights.data[j] } else { head.bias[j - nc * d] };
            let gj = grad[j] / n + if j < nc * d { hyper.l2 * w } else { 0.0 };
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let upd = hyper.lr * (m[j] / (1.0 - 0.9f64.powi(t))) / ((v[j] / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            if j < nc * d {
                head.weights.data[j] -= upd;
            } else {
                head.bias[j - nc * d] -= upd;
            }
        }
    }
    if !head.weights.all_finite() || head.bias.iter().any(|b| !b.is_finite()) {
        return Err(AttrError::InvalidParams("head training produced non-finite parameters".into()));
    }

    let accuracy = |idx: &[usize]| -> Result<f64, AttrError> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut correct = 0.0;
        for &i in idx {
            let pred = head.predict(&features[i])?;
            correct += match mode {
                HeadMode::Softmax => (pred == data[i].labels) as u8 as f64,
                // per-label agreement
                HeadMode::Sigmoid => {
                    (0..nc).filter(|c| pred.contains(c) == data[i].labels.contains(c)).count() as f64 / nc as f64
                }
            };
        }
        Ok(correct / idx.len() as f64)
    };
    let train_accuracy = accuracy(train)?;
    let holdout_accuracy = if hold.is_empty() { train_accuracy } else { accuracy(hold)? };
    for w in &warnings {
        log::warn!("{w}");
    }
    let report = HeadReport {
        train_examples: train.len(),
        holdout_examples: hold.len(),
        train_accuracy,
        holdout_accuracy,
        final_loss,
        warnings,
    };
    Ok((head, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_head(mode: HeadMode) -> LinearHead {
        let mut h = LinearHead::zeros(vec!["a".into(), "b".into(), "c".into()], mode, 5);
        for (i, w) in h.weights.data.iter_mut().enumerate() {
            *w = ((i * 37 % 11) as f64 - 5.0) / 7.0;
        }
        h.bias = vec![0.1, -0.2, 0.3];
        h
    }

    #[test]
    fn zero_head_is_uniform() {
        let h = LinearHead::zeros(vec!["x".into(), "y".into()], HeadMode::Softmax, 4);
        assert!((h.log_prob(&[1.0, 2.0, 3.0, 4.0], 1).unwrap().0 - 0.5f64.ln()).abs() < 1e-15);
        let h = LinearHead { mode: HeadMode::Sigmoid, ..h };
        assert!((h.log_prob(&[1.0; 4], 0).unwrap().0 - 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(h.log_prob(&[1.0; 3], 0), Err(AttrError::DimensionMismatch { .. })));
        assert!(matches!(h.log_prob(&[1.0; 4], 2), Err(AttrError::LabelOutOfRange { .. })));
    }

    #[test]
    fn softmax_probs_sum_to_one() {
        let h = random_head(HeadMode::Softmax);
        let s: f64 = h.log_probs(&[0.3, -1.0, 2.0, 0.5, 0.0]).unwrap().iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn graph_form_matches_analytic() {
        for mode in [HeadMode::Softmax, HeadMode::Sigmoid] {
            let h = random_head(mode);
            let x = vec![0.3, -1.0, 2.0, 0.5, 0.1];
            let (val, grad) = h.log_prob(&x, 2).unwrap();
            let mut g = Graph::<f64>::new();
            let xv = g.input(Tensor::from_vec(1, 5, x.clone()), true);
            let out = h.log_prob_graph(&mut g, xv, 2);
            assert!((g.scalar(out) - val).abs() < 1e-12);
            let gg = g.backward(out);
            for (a, b) in gg.get(xv).unwrap().data.iter().zip(&grad) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn container_round_trip() {
        let h = random_head(HeadMode::Sigmoid);
        let c = h.to_container();
        assert_eq!(LinearHead::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap(), h);
    }
}
