//! Python bindings: `import cuegen`.
//!
//! Structured results (reports, generations, configs) cross the boundary
//! as plain dicts via the stdlib `json` module. Errors raise
//! `cuegen.CuegenError` with the message `"<ErrorName>: <detail>"`.

use std::fmt::Display;
use std::sync::Arc;

use cuegen_core::attributes::{self, lda_fit, train_head, HeadHyper, HeadMode, LabeledText, LdaParams, LinearHead, TopicModel};
use cuegen_core::corpus::{self, LineKind};
use cuegen_core::evalsuite::{self, DistNorm, ReferenceIndex};
use cuegen_core::steering::{self, SteeringParams};
use cuegen_core::synthetic::{two_style_scripts, SyntheticSpec};
use cuegen_core::textmodel::{self, scene_sequences, LMConfig, SampleParams, TrainHyper, BOS};
use cuegen_service::candidates::{generate_candidates, prefix_ids, resolve_attribute, AttributeSpec};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

create_exception!(cuegen, CuegenError, PyValueError);

trait Named: Display {
    fn name(&self) -> &'static str;
}

macro_rules! named {
    ($($t:ty),*) => {$(
        impl Named for $t {
            fn name(&self) -> &'static str {
                <$t>::name(self)
            }
        }
    )*};
}

named!(corpus::CorpusError, textmodel::ModelError, attributes::AttrError, steering::SteerError, evalsuite::EvalError);

fn err<E: Named>(e: E) -> PyErr {
    CuegenError::new_err(format!("{}: {e}", e.name()))
}

fn invalid(msg: impl Display) -> PyErr {
    CuegenError::new_err(format!("InvalidParams: {msg}"))
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(invalid)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Overlay a Python dict on `base`; unknown keys are an error.
fn overlay<T: Serialize + DeserializeOwned>(base: T, over: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(over) = over else { return Ok(base) };
    let text: String = over.py().import("json")?.call_method1("dumps", (over,))?.extract()?;
    let Value::Object(over) = serde_json::from_str(&text).map_err(invalid)? else {
        return Err(invalid("expected a dict"));
    };
    let mut merged = serde_json::to_value(base).map_err(invalid)?;
    for (k, v) in over {
        if merged.get(&k).is_none() {
            return Err(invalid(format!("unknown key {k:?}")));
        }
        merged[&k] = v;
    }
    serde_json::from_value(merged).map_err(invalid)
}

#[pyclass(frozen, skip_from_py_object, module = "cuegen")]
#[derive(Clone)]
struct Script {
    inner: corpus::Script,
}

#[pymethods]
impl Script {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn title(&self) -> &str {
        &self.inner.title
    }

    #[getter]
    fn source_hash(&self) -> &str {
        &self.inner.source_hash
    }

    #[getter]
    fn num_scenes(&self) -> usize {
        self.inner.scenes.len()
    }

    #[getter]
    fn num_cues(&self) -> usize {
        self.inner.cue_count()
    }

    #[getter]
    fn num_dialogue(&self) -> usize {
        self.inner.dialogue_count()
    }

    fn __len__(&self) -> usize {
        self.inner.line_count()
    }

    /// Flat list of `{scene, index, kind, speaker, text}` dicts.
    fn lines<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rows: Vec<Value> = self
            .inner
            .scenes
            .iter()
            .flat_map(|s| {
                s.lines.iter().map(move |l| {
                    serde_json::json!({
                        "scene": s.index,
                        "index": l.index,
                        "kind": if l.kind == LineKind::Cue { "cue" } else { "dialogue" },
                        "speaker": l.speaker,
                        "text": l.text,
                    })
                })
            })
            .collect();
        to_py(py, &rows)
    }

    fn cues(&self) -> Vec<String> {
        self.inner.lines().filter(|l| l.is_cue()).map(|l| l.text.clone()).collect()
    }

    /// Lines as the language model sees them.
    fn model_texts(&self) -> Vec<String> {
        self.inner.lines().map(|l| l.model_text()).collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_canonical_text()
    }

    fn same_content(&self, other: &Script) -> bool {
        self.inner.same_content(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Script(title={:?}, scenes={}, dialogue={}, cues={})",
            self.inner.title,
            self.inner.scenes.len(),
            self.inner.dialogue_count(),
            self.inner.cue_count()
        )
    }
}

fn unwrap_scripts(scripts: &[Bound<'_, Script>]) -> Vec<corpus::Script> {
    scripts.iter().map(|s| s.get().inner.clone()).collect()
}

#[pyfunction]
fn parse_script(raw: &str) -> PyResult<Script> {
    corpus::parse_script(raw).map(|inner| Script { inner }).map_err(err)
}

#[pyfunction]
fn read_jsonl(text: &str) -> PyResult<Vec<Script>> {
    Ok(corpus::read_jsonl(text).map_err(err)?.into_iter().map(|inner| Script { inner }).collect())
}

#[pyfunction]
fn write_jsonl(scripts: Vec<Bound<'_, Script>>) -> String {
    corpus::write_jsonl(&unwrap_scripts(&scripts))
}

#[pyfunction]
fn preprocess(text: &str) -> String {
    corpus::preprocess(text)
}

/// Raw text of a generated two-style corpus.
#[pyfunction]
#[pyo3(signature = (scripts = 40, seed = 0))]
fn synthetic_scripts(scripts: usize, seed: u64) -> Vec<String> {
    two_style_scripts(&SyntheticSpec { scripts, seed, ..Default::default() })
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    evalsuite::levenshtein(a, b)
}

#[pyfunction]
fn lcsr(a: &str, b: &str) -> PyResult<f64> {
    evalsuite::lcsr(a, b).map_err(err)
}

#[pyfunction]
fn bi_sim(a: &str, b: &str) -> PyResult<f64> {
    evalsuite::bi_sim(a, b).map_err(err)
}

/// `texts` are token lists; `norm` is "ngrams" or "tokens".
#[pyfunction]
#[pyo3(signature = (texts, n, norm = "ngrams"))]
fn dist_n(texts: Vec<Vec<String>>, n: usize, norm: &str) -> PyResult<f64> {
    let norm = match norm {
        "ngrams" => DistNorm::NgramCount,
        "tokens" => DistNorm::TokenCount,
        other => return Err(invalid(format!("norm must be ngrams or tokens, got {other:?}"))),
    };
    evalsuite::dist_n(&texts, n, norm).map_err(err)
}

/// The `top_r` references closest in edit distance, as `(index, distance)`
/// pairs, nearest first.
#[pyfunction]
#[pyo3(signature = (sample, references, top_r = 10))]
fn nearest_cues(py: Python<'_>, sample: &str, references: Vec<String>, top_r: usize) -> PyResult<Vec<(usize, usize)>> {
    let index = ReferenceIndex::new(references);
    let found = py.detach(|| evalsuite::nearest_cues(sample, &index, top_r)).map_err(err)?;
    Ok(found.into_iter().map(|n| (n.index, n.distance)).collect())
}

/// Geometric-mean fusion of a perturbed and an unperturbed distribution.
#[pyfunction]
fn fuse(p_mod: Vec<f64>, p_unmod: Vec<f64>, gm_scale: f64) -> PyResult<Vec<f64>> {
    steering::fuse(&p_mod, &p_unmod, gm_scale).map_err(err)
}

#[pyclass(frozen, skip_from_py_object, module = "cuegen")]
#[derive(Clone)]
struct Vocab {
    inner: textmodel::Vocab,
}

#[pymethods]
impl Vocab {
    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocab(len={})", self.inner.len())
    }
}

#[pyfunction]
#[pyo3(signature = (texts, max_vocab = 10_000))]
fn train_tokenizer(texts: Vec<String>, max_vocab: usize) -> PyResult<Vocab> {
    textmodel::train_tokenizer(texts.iter().map(String::as_str), max_vocab).map(|inner| Vocab { inner }).map_err(err)
}

/// A trained language model with its vocabulary.
#[pyclass(frozen, module = "cuegen")]
struct Checkpoint {
    inner: Arc<textmodel::Checkpoint<f32>>,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Checkpoint { inner: Arc::new(textmodel::Checkpoint::load(path).map_err(err)?) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn vocab(&self) -> Vocab {
        Vocab { inner: self.inner.vocab.clone() }
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.model.config)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.model.num_params()
    }

    /// Plain top-k continuation of `prefix`.
    #[pyo3(signature = (prefix, top_k = 10, temperature = 1.0, max_len = 40, seed = 0))]
    fn sample(&self, py: Python<'_>, prefix: &str, top_k: usize, temperature: f64, max_len: usize, seed: u64) -> PyResult<String> {
        let ck = &self.inner;
        let ids = prefix_ids(ck, prefix, max_len);
        let params = SampleParams { top_k, temperature, max_len, seed };
        let out = py.detach(|| textmodel::sample(&ck.model, &ids, &params)).map_err(err)?;
        Ok(ck.vocab.decode(&out))
    }

    /// Mean negative log-likelihood per token of `text`.
    fn nll(&self, text: &str) -> PyResult<f64> {
        let mut ids = vec![BOS];
        ids.extend(self.inner.vocab.encode(text));
        let (total, n) = self.inner.model.nll(&ids, 1).map_err(err)?;
        Ok(total / n.max(1) as f64)
    }

    /// Train a cue/dialogue head on the lines of `scripts`.
    #[pyo3(signature = (scripts, hyper = None))]
    fn train_cue_head<'py>(
        &self,
        py: Python<'py>,
        scripts: Vec<Bound<'py, Script>>,
        hyper: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<(Head, Bound<'py, PyAny>)> {
        let hyper: HeadHyper = overlay(HeadHyper::default(), hyper)?;
        let data: Vec<LabeledText> = unwrap_scripts(&scripts)
            .iter()
            .flat_map(|s| s.lines().map(|l| LabeledText { text: l.model_text(), labels: vec![l.is_cue() as usize] }).collect::<Vec<_>>())
            .collect();
        let ck = &self.inner;
        let classes = vec!["dialogue".to_string(), "cue".to_string()];
        let (head, report) = py
            .detach(|| train_head(&data, &ck.model, &ck.vocab, classes, HeadMode::Softmax, &hyper))
            .map_err(err)?;
        Ok((Head { inner: head }, to_py(py, &report)?))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.model.config;
        format!("Checkpoint(layers={}, d_model={}, vocab={}, step={})", c.layers, c.d_model, c.vocab_size, self.inner.step)
    }
}

/// Train a language model on the scenes of `scripts`. `config` and `hyper`
/// are dicts overriding the model shape and training defaults.
#[pyfunction]
#[pyo3(signature = (scripts, vocab, config = None, hyper = None))]
fn train_lm<'py>(
    py: Python<'py>,
    scripts: Vec<Bound<'py, Script>>,
    vocab: &Vocab,
    config: Option<&Bound<'py, PyAny>>,
    hyper: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let mut config: LMConfig = overlay(LMConfig::default(), config)?;
    config.vocab_size = vocab.inner.len();
    let hyper: TrainHyper = overlay(TrainHyper::default(), hyper)?;
    let seqs = scene_sequences(&unwrap_scripts(&scripts), &vocab.inner);
    let (ck, report) = py.detach(|| textmodel::train_lm::<f32>(&seqs, &vocab.inner, config, &hyper)).map_err(err)?;
    Ok((Checkpoint { inner: Arc::new(ck) }, to_py(py, &report)?))
}

/// A linear attribute head.
#[pyclass(frozen, skip_from_py_object, module = "cuegen")]
#[derive(Clone)]
struct Head {
    inner: LinearHead,
}

#[pymethods]
impl Head {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        LinearHead::load(path).map(|inner| Head { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    /// Class log-probabilities of `text` under `checkpoint`'s features.
    fn log_probs(&self, checkpoint: &Checkpoint, text: &str) -> PyResult<Vec<f64>> {
        let ck = &checkpoint.inner;
        let x = attributes::text_features(&ck.model, &ck.vocab, text).map_err(err)?;
        self.inner.log_probs(&x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Head(classes={:?}, dim={})", self.inner.classes, self.inner.dim())
    }
}

#[pyclass(frozen, skip_from_py_object, module = "cuegen")]
#[derive(Clone)]
struct Topics {
    inner: TopicModel,
}

#[pymethods]
impl Topics {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        TopicModel::load(path).map(|inner| Topics { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[pyo3(signature = (topic, n = 10))]
    fn top_words(&self, topic: usize, n: usize) -> PyResult<Vec<(String, f64)>> {
        self.inner.top_words(topic, n).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Topics(k={}, words={})", self.inner.k, self.inner.num_words())
    }
}

/// Fit LDA over `texts` (one document each, stopwords removed).
#[pyfunction]
#[pyo3(signature = (texts, params = None))]
fn fit_topics(py: Python<'_>, texts: Vec<String>, params: Option<&Bound<'_, PyAny>>) -> PyResult<Topics> {
    let params: LdaParams = overlay(LdaParams::default(), params)?;
    let docs: Vec<Vec<String>> = texts.iter().map(|t| attributes::topic_tokens(t)).filter(|d| !d.is_empty()).collect();
    py.detach(|| lda_fit(&docs, &params)).map(|inner| Topics { inner }).map_err(err)
}

/// Steered, scored candidate generation over one checkpoint and whichever
/// attribute models are available.
#[pyclass(frozen, module = "cuegen")]
struct Generator {
    checkpoint: Arc<textmodel::Checkpoint<f32>>,
    cue_head: Option<LinearHead>,
    emotion_head: Option<LinearHead>,
    topics: Option<TopicModel>,
}

#[pymethods]
impl Generator {
    #[new]
    #[pyo3(signature = (checkpoint, cue_head = None, emotion_head = None, topics = None))]
    fn new(checkpoint: &Checkpoint, cue_head: Option<&Head>, emotion_head: Option<&Head>, topics: Option<&Topics>) -> Self {
        Generator {
            checkpoint: checkpoint.inner.clone(),
            cue_head: cue_head.map(|h| h.inner.clone()),
            emotion_head: emotion_head.map(|h| h.inner.clone()),
            topics: topics.map(|t| t.inner.clone()),
        }
    }

    /// `attribute` is `cue`, `dialogue`, `topic:<k>` or `emotion:<label>`;
    /// `params` overrides the steering defaults. Returns the generation as
    /// a dict with candidates sorted best first.
    #[pyo3(signature = (prefix, attribute = "cue", params = None, num_candidates = 1, compare = false))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        prefix: &str,
        attribute: &str,
        params: Option<&Bound<'py, PyAny>>,
        num_candidates: usize,
        compare: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let params: SteeringParams = overlay(SteeringParams::default(), params)?;
        params.validate().map_err(err)?;
        let spec = AttributeSpec::parse(attribute).map_err(|e| CuegenError::new_err(format!("InvalidAttribute: {e}")))?;
        let ck = &self.checkpoint;
        let attr = resolve_attribute(&spec, ck, self.cue_head.as_ref(), self.emotion_head.as_ref(), self.topics.as_ref())
            .map_err(|e| CuegenError::new_err(format!("InvalidAttribute: {e}")))?;
        let ids = prefix_ids(ck, prefix, params.max_len);
        let generation = py.detach(|| generate_candidates(ck, &attr, &ids, &params, num_candidates, compare)).map_err(err)?;
        to_py(py, &generation)
    }

    /// The default steering parameters as a dict.
    #[staticmethod]
    fn default_params(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
        to_py(py, &SteeringParams::default())
    }
}

#[pymodule]
#[pyo3(name = "cuegen")]
fn cuegen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CuegenError", m.py().get_type::<CuegenError>())?;
    m.add_class::<Script>()?;
    m.add_class::<Vocab>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Head>()?;
    m.add_class::<Topics>()?;
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(parse_script, m)?)?;
    m.add_function(wrap_pyfunction!(read_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_scripts, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(lcsr, m)?)?;
    m.add_function(wrap_pyfunction!(bi_sim, m)?)?;
    m.add_function(wrap_pyfunction!(dist_n, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_cues, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(train_tokenizer, m)?)?;
    m.add_function(wrap_pyfunction!(train_lm, m)?)?;
    m.add_function(wrap_pyfunction!(fit_topics, m)?)?;
    Ok(())
}
