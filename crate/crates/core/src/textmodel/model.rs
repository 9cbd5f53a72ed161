use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig { layers: 4, heads: 4, d_model: 128, context: 256, vocab_size: 8000, d_ff: 512, seed: 0 }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.layers, self.heads, self.d_model, self.context, self.vocab_size, self.d_ff];
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

// per-layer tensor slots, in storage order
const LAYER_SLOTS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const FIRST_LAYER: usize = 2;

#[derive(Clone, Copy)]
struct LayerIdx(usize);

impl LayerIdx {
    fn slot(self, s: usize) -> usize {
        FIRST_LAYER + self.0 * LAYER_SLOTS.len() + s
    }
}

/// Per-layer attention keys and values for the positions processed so far.
/// Keys and values are `[len × d_model]`, heads side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct PastState<T> {
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
}

impl<T: Scalar> PastState<T> {
    pub fn empty(config: &LMConfig) -> Self {
        PastState {
            keys: (0..config.layers).map(|_| Tensor::zeros(0, config.d_model)).collect(),
            values: (0..config.layers).map(|_| Tensor::zeros(0, config.d_model)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn zeros_like(&self) -> Self {
        PastState {
            keys: self.keys.iter().map(|k| Tensor::zeros(k.rows, k.cols)).collect(),
            values: self.values.iter().map(|v| Tensor::zeros(v.rows, v.cols)).collect(),
        }
    }

    /// Elementwise sum with a same-shaped perturbation.
    pub fn plus(&self, delta: &PastState<T>) -> Self {
        let add = |a: &Tensor<T>, b: &Tensor<T>| {
            let mut out = a.clone();
            out.add_assign(b);
            out
        };
        PastState {
            keys: self.keys.iter().zip(&delta.keys).map(|(a, b)| add(a, b)).collect(),
            values: self.values.iter().zip(&delta.values).map(|(a, b)| add(a, b)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.keys.iter().chain(&self.values).all(Tensor::all_finite)
    }
}

/// Graph handles of a past state.
#[derive(Debug, Clone, Copy)]
pub struct LayerKv {
    pub k: Var,
    pub v: Var,
}

pub enum ModelInput<'t> {
    Tokens(&'t [usize]),
    /// `[n × d_model]` input embeddings (positional embeddings are added).
    Embeddings(Var),
}

pub struct ForwardOutput {
    /// `[n × V]`
    pub logits: Var,
    /// Final-layer hidden states after the output layer norm, `[n × d]`.
    pub hidden: Var,
    /// Keys/values including the past, one entry per layer.
    pub present: Vec<LayerKv>,
}

/// Decoder-only transformer: pre-norm blocks, learned positions, output
/// projection tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T> {
    pub config: LMConfig,
    pub params: Vec<Tensor<T>>,
}

pub fn param_names(config: &LMConfig) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for l in 0..config.layers {
        names.extend(LAYER_SLOTS.iter().map(|s| format!("h{l}.{s}")));
    }
    names.push("lnf.g".into());
    names.push("lnf.b".into());
    names
}

pub fn param_shapes(c: &LMConfig) -> Vec<(usize, usize)> {
    let d = c.d_model;
    let mut shapes = vec![(c.vocab_size, d), (c.context, d)];
    for _ in 0..c.layers {
        shapes.extend([
            (1, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, c.d_ff),
            (1, c.d_ff),
            (c.d_ff, d),
            (1, d),
        ]);
    }
    shapes.extend([(1, d), (1, d)]);
    shapes
}

impl<T: Scalar> LanguageModel<T> {
    /// Random initialization from `config.seed`: N(0, 0.02) weights, residual
    /// output projections scaled by 1/sqrt(2·layers), zero biases, unit gains.
    pub fn new(config: LMConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let names = param_names(&config);
        let params = param_shapes(&config)
            .into_iter()
            .zip(&names)
            .map(|((r, c), name)| {
                if name.ends_with(".g") {
                    Tensor::filled(r, c, T::one())
                } else if r == 1 {
                    Tensor::zeros(r, c)
                } else {
                    let s = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") { resid_std } else { std };
                    let normal = Normal::new(0.0, s).unwrap();
                    Tensor::from_vec(r, c, (0..r * c).map(|_| T::from_f(normal.sample(&mut rng))).collect())
                }
            })
            .collect();
        Ok(LanguageModel { config, params })
    }

    pub fn from_params(config: LMConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != *s) {
            return Err(ModelError::Format("parameter shapes do not match config".into()));
        }
        Ok(LanguageModel { config, params })
    }

    pub fn names(&self) -> Vec<String> {
        param_names(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn token_embedding(&self) -> &Tensor<T> {
        &self.params[TOK_EMB]
    }

    pub fn cast<U: Scalar>(&self) -> LanguageModel<U> {
        LanguageModel { config: self.config, params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Add every parameter to `g` and return their handles in storage order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.borrowed(p, requires_grad)).collect()
    }

    /// Add a concrete past state to `g`.
    pub fn bind_past<'a>(&self, g: &mut Graph<'a, T>, past: &'a PastState<T>) -> Vec<LayerKv> {
        past.keys
            .iter()
            .zip(&past.values)
            .map(|(k, v)| LayerKv { k: g.borrowed(k, false), v: g.borrowed(v, false) })
            .collect()
    }

    /// Build the forward computation. `past` (possibly empty) holds
    /// `past_len` positions for every layer.
    pub fn forward_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        p: &[Var],
        input: ModelInput<'_>,
        past: Option<&[LayerKv]>,
        past_len: usize,
    ) -> Result<ForwardOutput, ModelError> {
        let c = &self.config;
        let n = match &input {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Embeddings(v) => g.value(*v).rows,
        };
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        if past_len + n > c.context {
            return Err(ModelError::ContextOverflow { needed: past_len + n, limit: c.context });
        }
        let tok = match input {
            ModelInput::Tokens(ids) => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
                    return Err(ModelError::InvalidToken(bad));
                }
                g.gather(p[TOK_EMB], ids)
            }
            ModelInput::Embeddings(v) => v,
        };
        let positions: Vec<usize> = (past_len..past_len + n).collect();
        let pos = g.gather(p[POS_EMB], &positions);
        let mut x = g.add(tok, pos);

        let mut present = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let li = LayerIdx(l);
            let w = |s: usize| p[li.slot(s)];
            let a = g.layer_norm(x, w(0), w(1));
            let q = g.matmul(a, w(2));
            let q = g.add_row(q, w(3));
            let k = g.matmul(a, w(4));
            let k = g.add_row(k, w(5));
            let v = g.matmul(a, w(6));
            let v = g.add_row(v, w(7));
            let (k_all, v_all) = match past {
                Some(kv) if past_len > 0 => (g.concat_rows(&[kv[l].k, k]), g.concat_rows(&[kv[l].v, v])),
                _ => (k, v),
            };
            present.push(LayerKv { k: k_all, v: v_all });
            let att = g.attention(q, k_all, v_all, c.heads, past_len);
            let o = g.matmul(att, w(8));
            let o = g.add_row(o, w(9));
            x = g.add(x, o);
            let m = g.layer_norm(x, w(10), w(11));
            let m = g.matmul(m, w(12));
            let m = g.add_row(m, w(13));
            let m = g.gelu(m);
            let m = g.matmul(m, w(14));
            let m = g.add_row(m, w(15));
            x = g.add(x, m);
        }
        let nf = p.len();
        let hidden = g.layer_norm(x, p[nf - 2], p[nf - 1]);
        let logits = g.matmul_bt(hidden, p[TOK_EMB]);
        Ok(ForwardOutput { logits, hidden, present })
    }

    /// Inference forward: logits for every input position, final hidden
    /// states and the extended past.
    pub fn forward_full(
        &self,
        tokens: &[usize],
        past: Option<&PastState<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>, PastState<T>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let past_len = past.map_or(0, PastState::len);
        let kv = past.map(|ps| self.bind_past(&mut g, ps));
        let out = self.forward_graph(&mut g, &p, ModelInput::Tokens(tokens), kv.as_deref(), past_len)?;
        let present = PastState {
            keys: out.present.iter().map(|kv| g.value(kv.k).clone()).collect(),
            values: out.present.iter().map(|kv| g.value(kv.v).clone()).collect(),
        };
        Ok((g.value(out.logits).clone(), g.value(out.hidden).clone(), present))
    }

    /// Next-token logits after `tokens` (continuing from `past`), and the
    /// new past.
    pub fn lm_forward(
        &self,
        tokens: &[usize],
        past: Option<&PastState<T>>,
    ) -> Result<(Vec<T>, PastState<T>), ModelError> {
        let (logits, _, present) = self.forward_full(tokens, past)?;
        Ok((logits.row(logits.rows - 1).to_vec(), present))
    }

    /// Mean of the final-layer hidden states over `tokens`.
    pub fn pooled_hidden(&self, tokens: &[usize]) -> Result<Vec<T>, ModelError> {
        let (_, hidden, _) = self.forward_full(tokens, None)?;
        let n = T::from_f(hidden.rows as f64);
        Ok((0..hidden.cols).map(|c| (0..hidden.rows).map(|r| hidden.at(r, c)).sum::<T>() / n).collect())
    }

    /// Sum of `-log p(tokens[i] | tokens[..i])` for `i >= from` (natural log).
    pub fn nll(&self, tokens: &[usize], from: usize) -> Result<(f64, usize), ModelError> {
        if tokens.len() < 2 || from >= tokens.len() {
            return Ok((0.0, 0));
        }
        let (logits, _, _) = self.forward_full(&tokens[..tokens.len() - 1], None)?;
        let mut total = 0.0;
        let mut count = 0;
        for i in from.max(1)..tokens.len() {
            let lp = super::tensor::log_softmax(logits.row(i - 1));
            total -= lp[tokens[i]].f();
            count += 1;
        }
        Ok((total, count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::tensor::softmax;

    fn tiny() -> LMConfig {
        LMConfig { layers: 2, heads: 2, d_model: 16, context: 24, vocab_size: 20, d_ff: 32, seed: 3 }
    }

    #[test]
    fn config_validation() {
        assert!(LMConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(LMConfig { layers: 0, ..tiny() }.validate().is_err());
        assert!(LMConfig::default().validate().is_ok());
        assert_eq!(param_names(&tiny()).len(), param_shapes(&tiny()).len());
    }

    #[test]
    fn untrained_logits_are_normalizable() {
        let m = LanguageModel::<f32>::new(tiny()).unwrap();
        let (logits, past) = m.lm_forward(&[0, 5, 6], None).unwrap();
        assert_eq!(logits.len(), 20);
        assert!(logits.iter().all(|x| x.is_finite()));
        let s: f32 = softmax(&logits).iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
        assert_eq!(past.len(), 3);
        assert_eq!(past.layers(), 2);
    }

    #[test]
    fn incremental_matches_full() {
        let m = LanguageModel::<f64>::new(tiny()).unwrap();
        let toks: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 20).collect();
        let (full, _, _) = m.forward_full(&toks, None).unwrap();
        let mut past: Option<PastState<f64>> = None;
        for (i, &t) in toks.iter().enumerate() {
            let (logits, p) = m.lm_forward(&[t], past.as_ref()).unwrap();
            for (a, b) in logits.iter().zip(full.row(i)) {
                assert!((a - b).abs() <= 1e-9, "pos {i}");
            }
            past = Some(p);
        }
    }

    #[test]
    fn causal() {
        let m = LanguageModel::<f64>::new(tiny()).unwrap();
        let (a, _, _) = m.forward_full(&[1, 2, 3, 4, 5], None).unwrap();
        let (b, _, _) = m.forward_full(&[1, 2, 3, 9, 11], None).unwrap();
        assert_eq!(a.slice_rows(0, 3), b.slice_rows(0, 3));
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn context_overflow_and_bad_tokens() {
        let m = LanguageModel::<f32>::new(tiny()).unwrap();
        let long = vec![4; 25];
        assert!(matches!(m.lm_forward(&long, None), Err(ModelError::ContextOverflow { needed: 25, limit: 24 })));
        let (_, past) = m.lm_forward(&[4; 20], None).unwrap();
        assert!(matches!(m.lm_forward(&[4; 5], Some(&past)), Err(ModelError::ContextOverflow { .. })));
        assert!(matches!(m.lm_forward(&[99], None), Err(ModelError::InvalidToken(99))));
        assert!(matches!(m.lm_forward(&[], None), Err(ModelError::EmptyInput)));
    }
}
