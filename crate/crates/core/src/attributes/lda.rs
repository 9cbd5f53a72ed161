use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttrError;
use crate::container::{Container, RawTensor};

pub const LDA_KIND: &str = "cuegen.lda";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaParams {
    pub k: usize,
    pub iters: usize,
    /// Document-topic prior; `None` means `50 / k`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub seed: u64,
}

impl Default for LdaParams {
    fn default() -> Self {
        LdaParams { k: 10, iters: 1000, alpha: None, beta: 0.01, seed: 0 }
    }
}

/// Collapsed-Gibbs LDA state. Word ids follow first appearance in the
/// training documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub vocab: Vec<String>,
    pub docs: Vec<Vec<usize>>,
    /// Topic assignment per token, parallel to `docs`.
    pub z: Vec<Vec<usize>>,
    /// `[k × V]`
    pub n_kw: Vec<u32>,
    /// `[D × k]`
    pub n_dk: Vec<u32>,
    pub n_k: Vec<u32>,
    pub sweeps: usize,
}

impl TopicModel {
    pub fn num_words(&self) -> usize {
        self.vocab.len()
    }

    /// Check every count against the assignments.
    pub fn check_invariants(&self) -> Result<(), String> {
        let (k, v) = (self.k, self.num_words());
        let mut kw = vec![0u32; k * v];
        let mut dk = vec![0u32; self.docs.len() * k];
        for (d, (doc, zs)) in self.docs.iter().zip(&self.z).enumerate() {
            if doc.len() != zs.len() {
                return Err(format!("doc {d}: {} tokens but {} assignments", doc.len(), zs.len()));
            }
            for (&w, &t) in doc.iter().zip(zs) {
                if t >= k || w >= v {
                    return Err(format!("doc {d}: assignment out of range"));
                }
                kw[t * v + w] += 1;
                dk[d * k + t] += 1;
            }
        }
        if kw != self.n_kw {
            return Err("topic-word counts disagree with assignments".into());
        }
        if dk != self.n_dk {
            return Err("doc-topic counts disagree with assignments".into());
        }
        for t in 0..k {
            let row: u32 = self.n_kw[t * v..(t + 1) * v].iter().sum();
            if row != self.n_k[t] {
                return Err(format!("topic {t}: row sum {row} but total {}", self.n_k[t]));
            }
        }
        for (d, doc) in self.docs.iter().enumerate() {
            let s: u32 = self.n_dk[d * k..(d + 1) * k].iter().sum();
            if s as usize != doc.len() {
                return Err(format!("doc {d}: topic counts sum to {s}, length {}", doc.len()));
            }
        }
        Ok(())
    }

    /// `φ_{k,w} = (n_{k,w} + β) / (n_k + Vβ)`
    pub fn phi(&self, topic: usize, w: usize) -> f64 {
        let v = self.num_words();
        (self.n_kw[topic * v + w] as f64 + self.beta) / (self.n_k[topic] as f64 + v as f64 * self.beta)
    }

    /// The `n` highest-φ words of `topic`, ties by word id.
    pub fn top_words(&self, topic: usize, n: usize) -> Result<Vec<(String, f64)>, AttrError> {
        if topic >= self.k {
            return Err(AttrError::TopicOutOfRange { topic, k: self.k });
        }
        let v = self.num_words();
        let mut ids: Vec<usize> = (0..v).collect();
        // φ is monotone in n_kw within a topic, so rank on the integer counts
        ids.sort_by(|&a, &b| self.n_kw[topic * v + b].cmp(&self.n_kw[topic * v + a]).then(a.cmp(&b)));
        Ok(ids.into_iter().take(n).map(|w| (self.vocab[w].clone(), self.phi(topic, w))).collect())
    }

    fn sweep(&mut self, rng: &mut ChaCha8Rng, p: &mut [f64]) {
        let (k, v) = (self.k, self.num_words());
        let vbeta = v as f64 * self.beta;
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i];
                let old = self.z[d][i];
                self.n_kw[old * v + w] -= 1;
                self.n_dk[d * k + old] -= 1;
                self.n_k[old] -= 1;
                let mut total = 0.0;
                for t in 0..k {
                    total += (self.n_dk[d * k + t] as f64 + self.alpha) * (self.n_kw[t * v + w] as f64 + self.beta)
                        / (self.n_k[t] as f64 + vbeta);
                    p[t] = total;
                }
                let u = rng.random::<f64>() * total;
                let new = p.iter().position(|&c| c > u).unwrap_or(k - 1);
                self.z[d][i] = new;
                self.n_kw[new * v + w] += 1;
                self.n_dk[d * k + new] += 1;
                self.n_k[new] += 1;
            }
        }
        self.sweeps += 1;
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "k": self.k,
            "alpha": self.alpha,
            "beta": self.beta,
            "vocab": self.vocab,
            "doc_lengths": self.docs.iter().map(Vec::len).collect::<Vec<_>>(),
            "sweeps": self.sweeps,
        });
        let mut c = Container::new(LDA_KIND, meta);
        let flat = |xs: &[Vec<usize>]| xs.iter().flatten().map(|&x| x as u32).collect::<Vec<_>>();
        let tokens = flat(&self.docs);
        c.push(RawTensor::from_counts("n_kw", self.k, self.num_words(), &self.n_kw));
        c.push(RawTensor::from_counts("n_dk", self.docs.len(), self.k, &self.n_dk));
        c.push(RawTensor::from_counts("n_k", 1, self.k, &self.n_k));
        c.push(RawTensor::from_counts("tokens", 1, tokens.len(), &tokens));
        c.push(RawTensor::from_counts("z", 1, tokens.len(), &flat(&self.z)));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, AttrError> {
        c.expect_kind(LDA_KIND)?;
        #[derive(Deserialize)]
        struct Meta {
            k: usize,
            alpha: f64,
            beta: f64,
            vocab: Vec<String>,
            doc_lengths: Vec<usize>,
            sweeps: usize,
        }
        let m: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| AttrError::Format(e.to_string()))?;
        let tokens = c.tensor("tokens")?.to_counts()?;
        let zs = c.tensor("z")?.to_counts()?;
        if tokens.len() != m.doc_lengths.iter().sum::<usize>() || zs.len() != tokens.len() {
            return Err(AttrError::Format("token count does not match document lengths".into()));
        }
        let mut docs = Vec::new();
        let mut z = Vec::new();
        let mut at = 0;
        for len in m.doc_lengths {
            docs.push(tokens[at..at + len].iter().map(|&x| x as usize).collect());
            z.push(zs[at..at + len].iter().map(|&x| x as usize).collect());
            at += len;
        }
        let model = TopicModel {
            k: m.k,
            alpha: m.alpha,
            beta: m.beta,
            vocab: m.vocab,
            docs,
            z,
            n_kw: c.tensor("n_kw")?.to_counts()?,
            n_dk: c.tensor("n_dk")?.to_counts()?,
            n_k: c.tensor("n_k")?.to_counts()?,
            sweeps: m.sweeps,
        };
        model.check_invariants().map_err(AttrError::Format)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AttrError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AttrError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Fit LDA by collapsed Gibbs sampling. Count invariants are re-derived
/// from scratch after every sweep in debug builds.
pub fn lda_fit<S: AsRef<str>>(docs: &[Vec<S>], params: &LdaParams) -> Result<TopicModel, AttrError> {
    let k = params.k;
    let alpha = params.alpha.unwrap_or(50.0 / k.max(1) as f64);
    if k == 0 || !(alpha > 0.0) || !(params.beta > 0.0) {
        return Err(AttrError::InvalidParams("k, alpha and beta must be positive".into()));
    }
    if docs.len() < k {
        return Err(AttrError::TooFewDocs { docs: docs.len(), k });
    }
    let mut vocab: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let docs: Vec<Vec<usize>> = docs
        .iter()
        .map(|doc| {
            doc.iter()
                .map(|w| {
                    let w = w.as_ref();
                    *index.entry(w.to_string()).or_insert_with(|| {
                        vocab.push(w.to_string());
                        vocab.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut model = TopicModel {
        k,
        alpha,
        beta: params.beta,
        vocab,
        z: Vec::with_capacity(docs.len()),
        n_kw: vec![0; k * v],
        n_dk: vec![0; docs.len() * k],
        n_k: vec![0; k],
        docs,
        sweeps: 0,
    };
    for d in 0..model.docs.len() {
        let zs: Vec<usize> = (0..model.docs[d].len()).map(|_| rng.random_range(0..k)).collect();
        for (&w, &t) in model.docs[d].iter().zip(&zs) {
            model.n_kw[t * v + w] += 1;
            model.n_dk[d * k + t] += 1;
            model.n_k[t] += 1;
        }
        model.z.push(zs);
    }
    debug_assert_eq!(model.check_invariants(), Ok(()));
    let mut p = vec![0.0; k];
    for _ in 0..params.iters {
        model.sweep(&mut rng, &mut p);
        debug_assert_eq!(model.check_invariants(), Ok(()));
    }
    Ok(model)
}
