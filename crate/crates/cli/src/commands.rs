use std::fs;
use std::net::SocketAddr;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cuegen_core::attributes::{
    import_emotion_labels, lda_fit, topic_tokens, train_head, AttrError, BowAttribute, EmotionMap, HeadHyper, HeadMode,
    LabeledText, LdaParams, LinearHead, TopicModel, PLUTCHIK,
};
use cuegen_core::corpus::{parse_script, read_jsonl, scene_stats, split, write_jsonl, CorpusError, PosLexicon, Script, SplitSpec};
use cuegen_core::evalsuite::{run_eval, sample_references, DistNorm, EvalConfig, EvalError, EvalReport};
use cuegen_core::steering::{AttributeModel, SteerError, SteeringParams};
use cuegen_core::textmodel::{sample, scene_sequences, train_lm, SampleParams, train_tokenizer, Checkpoint, LMConfig, ModelError, TrainHyper, Vocab};
use cuegen_service::candidates::{generate_candidates, prefix_ids, resolve_attribute, AttributeKind, AttributeSpec, ResolvedAttribute};
use cuegen_service::ServiceConfig;
use serde_json::{json, Value};

use crate::config::{merge, set, FileConfig};
use crate::{Cli, Command, DistNormArg, EvalArgs, GenerateArgs, GeneratorId, HeadKind, LdaArgs, LdaDocs, SteeringFlags};

pub fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = Output { json: cli.json };
    match &cli.command {
        Command::Parse { input, out: path, stats_out } => parse(&out, input, path, stats_out.as_deref()),
        Command::Split { input, out_dir, fractions } => split_cmd(&out, input, out_dir, fractions, cli.seed),
        Command::TrainTokenizer { input, out: path, max_vocab } => tokenizer(&out, input, path, *max_vocab),
        Command::TrainLm(a) => train_lm_cmd(&out, &file, a, cli.seed),
        Command::TrainAttr(a) => train_attr(&out, &file, a, cli.seed),
        Command::Lda(a) => lda(&out, &file, a, cli.seed),
        Command::Generate(a) => generate(&out, &file, a, cli.seed),
        Command::Eval(a) => eval(&out, &file, a, cli.seed),
        Command::Serve(a) => {
            let config = ServiceConfig {
                store_dir: a.store.clone(),
                checkpoint: a.checkpoint.clone(),
                cue_head: a.head.clone(),
                emotion_head: a.emotion_head.clone(),
                lda: a.lda.clone(),
            };
            let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad host/port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cuegen_service::serve(&config, addr)).map_err(|e| anyhow!(e))
        }
    }
}

/// Stable name of the underlying domain error, for `--json` error output.
pub fn error_name(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return e.name();
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return e.name();
        }
        if let Some(e) = cause.downcast_ref::<AttrError>() {
            return e.name();
        }
        if let Some(e) = cause.downcast_ref::<SteerError>() {
            return e.name();
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return e.name();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "Io";
        }
    }
    "Error"
}

struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            print!("{}", human());
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_corpus(path: &Path) -> Result<Vec<Script>> {
    read_jsonl(&read(path)?).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_lm(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse(out: &Output, inputs: &[std::path::PathBuf], path: &Path, stats_out: Option<&Path>) -> Result<()> {
    let mut scripts = Vec::new();
    for p in inputs {
        let s = parse_script(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        scripts.push(s);
    }
    let jsonl = write_jsonl(&scripts);
    write(path, &jsonl)?;
    if let Some(stats) = stats_out {
        let lex = PosLexicon::bundled();
        let reports: Vec<_> = scripts.iter().map(|s| scene_stats(s, &lex)).collect();
        write(stats, &serde_json::to_string_pretty(&reports)?)?;
    }
    let rows: Vec<Value> = inputs
        .iter()
        .zip(&scripts)
        .map(|(p, s)| {
            json!({
                "file": p.display().to_string(), "id": s.id, "title": s.title, "scenes": s.scenes.len(),
                "dialogue": s.dialogue_count(), "cues": s.cue_count(),
            })
        })
        .collect();
    let lines = jsonl.lines().count();
    out.emit(json!({ "scripts": rows, "lines": lines, "out": path.display().to_string() }), || {
        let mut s = String::new();
        for (p, sc) in inputs.iter().zip(&scripts) {
            s += &format!("{}: {} scenes, {} dialogue, {} cues\n", p.display(), sc.scenes.len(), sc.dialogue_count(), sc.cue_count());
        }
        s + &format!("wrote {lines} lines to {}\n", path.display())
    });
    Ok(())
}

fn split_cmd(out: &Output, input: &Path, dir: &Path, fractions: &str, seed: u64) -> Result<()> {
    let f: Vec<f64> = fractions
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad --fractions {fractions:?}"))?;
    let [a, b, c] = f[..] else { bail!("--fractions needs three values, got {}", f.len()) };
    let parts = split(read_corpus(input)?, &SplitSpec { fractions: (a, b, c), seed })?;
    let mut counts = serde_json::Map::new();
    for (name, scripts) in [("train", &parts.train), ("attribute", &parts.attribute), ("test", &parts.test)] {
        write(&dir.join(format!("{name}.jsonl")), &write_jsonl(scripts))?;
        counts.insert(name.into(), json!(scripts.len()));
    }
    out.emit(Value::Object(counts.clone()), || {
        format!("train {} / attribute {} / test {} scripts in {}\n", counts["train"], counts["attribute"], counts["test"], dir.display())
    });
    Ok(())
}

fn model_texts(scripts: &[Script]) -> Vec<String> {
    scripts.iter().flat_map(|s| s.lines().map(|l| l.model_text())).collect()
}

fn tokenizer(out: &Output, input: &Path, path: &Path, max_vocab: usize) -> Result<()> {
    let texts = model_texts(&read_corpus(input)?);
    let vocab = train_tokenizer(texts.iter().map(String::as_str), max_vocab)?;
    write(path, &serde_json::to_string(&vocab)?)?;
    out.emit(json!({ "vocab_size": vocab.len(), "out": path.display().to_string() }), || {
        format!("vocabulary of {} tokens written to {}\n", vocab.len(), path.display())
    });
    Ok(())
}

fn train_lm_cmd(out: &Output, file: &FileConfig, a: &crate::TrainLmArgs, seed: u64) -> Result<()> {
    let scripts = read_corpus(&a.input)?;
    let vocab: Vocab = serde_json::from_str(&read(&a.vocab)?).context("reading vocabulary")?;
    let mut config = merge(LMConfig { seed, ..Default::default() }, file.model.as_ref(), "model")?;
    config.vocab_size = vocab.len();
    set(&mut config.layers, a.layers);
    set(&mut config.heads, a.heads);
    set(&mut config.d_model, a.d_model);
    set(&mut config.context, a.context);
    set(&mut config.d_ff, a.d_ff);
    let mut hyper = merge(TrainHyper { seed, ..Default::default() }, file.train.as_ref(), "train")?;
    set(&mut hyper.steps, a.steps);
    set(&mut hyper.lr, a.lr);
    set(&mut hyper.batch, a.batch);
    set(&mut hyper.warmup, a.warmup);
    set(&mut hyper.clip, a.clip);
    set(&mut hyper.val_fraction, a.val_fraction);

    let (ck, report) = train_lm::<f32>(&scene_sequences(&scripts, &vocab), &vocab, config, &hyper)?;
    ck.save(&a.out)?;
    let summary = json!({
        "out": a.out.display().to_string(),
        "params": ck.model.num_params(),
        "steps": hyper.steps,
        "final_loss": report.losses.last(),
        "val_perplexity": report.val_perplexity,
        "uniform_perplexity": report.uniform_perplexity,
        "seconds": report.seconds,
    });
    out.emit(summary, || {
        format!(
            "{} parameters, {} steps in {:.1}s; validation perplexity {:.2} (uniform {:.1}); saved {}\n",
            ck.model.num_params(),
            hyper.steps,
            report.seconds,
            report.val_perplexity,
            report.uniform_perplexity,
            a.out.display()
        )
    });
    Ok(())
}

fn train_attr(out: &Output, file: &FileConfig, a: &crate::TrainAttrArgs, seed: u64) -> Result<()> {
    let ck = load_lm(&a.lm)?;
    let mut hyper = merge(HeadHyper { seed, ..Default::default() }, file.head.as_ref(), "head")?;
    set(&mut hyper.epochs, a.epochs);
    set(&mut hyper.lr, a.lr);
    set(&mut hyper.l2, a.l2);
    set(&mut hyper.holdout_fraction, a.holdout);
    let (data, classes, mode, dropped) = match a.kind {
        HeadKind::Cue => {
            let data: Vec<LabeledText> = read_corpus(&a.input)?
                .iter()
                .flat_map(|s| s.lines())
                .map(|l| LabeledText { text: l.model_text(), labels: vec![l.is_cue() as usize] })
                .collect();
            (data, vec!["dialogue".to_string(), "cue".to_string()], HeadMode::Softmax, 0)
        }
        HeadKind::Emotion => {
            let map = match &a.emotion_map {
                Some(p) => EmotionMap::parse(&read(p)?, &PLUTCHIK)?,
                None => EmotionMap::bundled(),
            };
            let ds = import_emotion_labels(&read(&a.input)?, &map)?;
            (ds.examples, ds.labels, HeadMode::Sigmoid, ds.dropped)
        }
    };
    let (head, report) = train_head(&data, &ck.model, &ck.vocab, classes, mode, &hyper)?;
    head.save(&a.out)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    out.emit(json!({ "out": a.out.display().to_string(), "classes": head.classes, "dropped": dropped, "report": report }), || {
        format!(
            "{} head over {:?}: train accuracy {:.3}, holdout accuracy {:.3} ({} / {} examples); saved {}\n",
            format!("{:?}", a.kind).to_lowercase(),
            head.classes,
            report.train_accuracy,
            report.holdout_accuracy,
            report.train_examples,
            report.holdout_examples,
            a.out.display()
        )
    });
    Ok(())
}

fn lda(out: &Output, file: &FileConfig, a: &LdaArgs, seed: u64) -> Result<()> {
    let scripts = read_corpus(&a.input)?;
    let docs: Vec<Vec<String>> = scripts
        .iter()
        .flat_map(|s| s.lines())
        .filter(|l| match a.docs {
            LdaDocs::Cues => l.is_cue(),
            LdaDocs::Dialogue => !l.is_cue(),
            LdaDocs::All => true,
        })
        .map(|l| topic_tokens(&l.text))
        .filter(|d| !d.is_empty())
        .collect();
    let mut params = merge(LdaParams { seed, ..Default::default() }, file.lda.as_ref(), "lda")?;
    set(&mut params.k, a.k);
    set(&mut params.iters, a.iters);
    if a.alpha.is_some() {
        params.alpha = a.alpha;
    }
    set(&mut params.beta, a.beta);
    let model = lda_fit(&docs, &params)?;
    model.save(&a.out)?;
    let mut topics = Vec::new();
    for k in 0..model.k {
        let words = model.top_words(k, a.top)?;
        if let Some(dir) = &a.bow_dir {
            let list: String = words.iter().map(|(w, _)| format!("{w}\n")).collect();
            write(&dir.join(format!("topic_{k}.txt")), &list)?;
        }
        topics.push(words);
    }
    out.emit(
        json!({
            "out": a.out.display().to_string(), "documents": docs.len(), "k": model.k,
            "topics": topics.iter().map(|t| t.iter().map(|(w, p)| json!([w, p])).collect::<Vec<_>>()).collect::<Vec<_>>(),
        }),
        || {
            let mut s = format!("{} documents, {} topics; saved {}\n", docs.len(), model.k, a.out.display());
            for (k, t) in topics.iter().enumerate() {
                let top: Vec<&str> = t.iter().take(10).map(|(w, _)| w.as_str()).collect();
                s += &format!("topic {k}: {}\n", top.join(" "));
            }
            s
        },
    );
    Ok(())
}

fn steering_params(file: &FileConfig, f: &SteeringFlags, seed: u64) -> Result<SteeringParams> {
    let mut p = merge(SteeringParams::default(), file.steering.as_ref(), "steering")?;
    set(&mut p.alpha, f.alpha);
    set(&mut p.gamma, f.gamma);
    set(&mut p.kl_scale, f.kl_scale);
    set(&mut p.gm_scale, f.gm_scale);
    set(&mut p.num_iterations, f.num_iterations);
    set(&mut p.top_k, f.top_k);
    set(&mut p.temperature, f.temperature);
    set(&mut p.max_len, f.max_len);
    set(&mut p.horizon, f.horizon);
    p.seed = seed;
    p.validate()?;
    Ok(p)
}

fn attribute(ck: &Checkpoint<f32>, f: &crate::AttributeFlags) -> Result<ResolvedAttribute> {
    let spec = AttributeSpec::parse(&f.attribute).map_err(|e| anyhow!("--attribute: {e}"))?;
    if let (Some(path), Ok(AttributeKind::Topic(k))) = (&f.bow_file, spec.kind()) {
        let bow = BowAttribute::from_list(k, &read(path)?, &ck.vocab)?;
        return Ok(ResolvedAttribute { label: format!("topic:{k}"), model: AttributeModel::Bow(bow), class: 0 });
    }
    let head = |p: &Option<std::path::PathBuf>| p.as_ref().map(LinearHead::load).transpose();
    let lda = f.lda.as_ref().map(TopicModel::load).transpose()?;
    Ok(resolve_attribute(&spec, ck, head(&f.head)?.as_ref(), head(&f.emotion_head)?.as_ref(), lda.as_ref())?)
}

fn generate(out: &Output, file: &FileConfig, a: &GenerateArgs, seed: u64) -> Result<()> {
    if !(1..=cuegen_service::MAX_CANDIDATES).contains(&a.num_candidates) {
        bail!("--num-candidates must be in [1, {}]", cuegen_service::MAX_CANDIDATES);
    }
    let ck = load_lm(&a.lm)?;
    let params = steering_params(file, &a.steering, seed)?;
    let attr = attribute(&ck, &a.attr)?;
    let ids = prefix_ids(&ck, &a.prefix, params.max_len);
    let generation = generate_candidates(&ck, &attr, &ids, &params, a.num_candidates, a.compare)?;
    out.emit(json!({ "prefix": a.prefix, "params": params, "generation": generation }), || {
        let mut s = format!("prefix: {}\nattribute: {}\n", a.prefix, generation.attribute);
        for c in &generation.candidates {
            s += &format!(
                "[seed {}] {}\n    attr log-lik {:.4}  mean KL {:.4}  perplexity {}  steps {}  loss {:.4} -> {:.4}  fallbacks {}\n",
                c.seed,
                c.text,
                c.attribute_log_likelihood,
                c.mean_kl,
                c.perplexity.map_or("-".into(), |p| format!("{p:.2}")),
                c.trace.steps,
                c.trace.mean_loss_before,
                c.trace.mean_loss_after,
                c.trace.fallbacks,
            );
        }
        if let Some(u) = &generation.unsteered {
            s += &format!("unsteered attr log-lik: mean {:.4}, best {:.4}\n", u.mean_attribute_log_likelihood, u.best_attribute_log_likelihood);
        }
        s
    });
    Ok(())
}

fn eval(out: &Output, file: &FileConfig, a: &EvalArgs, seed: u64) -> Result<()> {
    let refs_corpus = read_corpus(&a.references)?;
    let cues: Vec<String> = refs_corpus.iter().flat_map(|s| s.lines()).filter(|l| l.is_cue()).map(|l| l.text.clone()).collect();
    let references = sample_references(&cues, a.reference_size, seed);
    if references.is_empty() {
        return Err(EvalError::EmptyReferences.into());
    }
    let prompt_corpus = match &a.prompts {
        Some(p) => read_corpus(p)?,
        None => refs_corpus,
    };
    let prompts: Vec<String> =
        prompt_corpus.iter().flat_map(|s| s.lines()).filter(|l| !l.is_cue()).map(|l| l.model_text()).collect();
    let config = EvalConfig {
        num_samples: a.num_samples,
        reference_size: a.reference_size.min(references.len()),
        top_r: a.top_r,
        seed,
        dist_norm: match a.dist_norm {
            DistNormArg::Ngrams => DistNorm::NgramCount,
            DistNormArg::Tokens => DistNorm::TokenCount,
        },
    };
    let needs_lm = a.generator.iter().any(|g| *g != GeneratorId::Echo);
    let ck = match (&a.lm, needs_lm) {
        (Some(p), _) => Some(load_lm(p)?),
        (None, true) => bail!("--lm is required for steered and unsteered generators"),
        (None, false) => None,
    };
    let params = steering_params(file, &a.steering, seed)?;
    if needs_lm && prompts.is_empty() {
        bail!("no dialogue lines to use as prompts");
    }

    let mut reports: Vec<EvalReport> = Vec::new();
    for g in &a.generator {
        let name = format!("{g:?}").to_lowercase();
        let report = match g {
            GeneratorId::Echo => {
                let refs = references.clone();
                run_eval(&name, |i| Ok::<_, String>(refs[i % refs.len()].clone()), &references, &config)?
            }
            GeneratorId::Steered => {
                let ck = ck.as_ref().expect("checked above");
                let attr = attribute(ck, &a.attr)?;
                let gen = |i: usize| -> Result<String, String> {
                    let p = SteeringParams { seed: seed.wrapping_add(i as u64), ..params };
                    let ids = prefix_ids(ck, &prompts[i % prompts.len()], p.max_len);
                    let g = generate_candidates(ck, &attr, &ids, &p, 1, false).map_err(|e| e.to_string())?;
                    Ok(g.candidates[0].text.clone())
                };
                run_eval(&name, gen, &references, &config)?
            }
            GeneratorId::Unsteered => {
                let ck = ck.as_ref().expect("checked above");
                let gen = |i: usize| -> Result<String, String> {
                    let sp = SampleParams {
                        top_k: params.top_k,
                        temperature: params.temperature,
                        max_len: params.max_len,
                        seed: seed.wrapping_add(i as u64),
                    };
                    let ids = prefix_ids(ck, &prompts[i % prompts.len()], sp.max_len);
                    Ok(ck.vocab.decode(&sample(&ck.model, &ids, &sp).map_err(|e| e.to_string())?))
                };
                run_eval(&name, gen, &references, &config)?
            }
        };
        reports.push(report);
    }
    if let Some(path) = &a.out {
        write(path, &serde_json::to_string_pretty(&reports)?)?;
    }
    let summary: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "generator": r.generator, "num_samples": r.num_samples, "reference_size": r.reference_size,
                "top_r": r.top_r, "seed": r.seed, "mean_lcsr": r.mean_lcsr, "mean_bi_sim": r.mean_bi_sim,
                "dist": r.dist, "dist_normalization": r.dist_normalization, "runtime": r.runtime,
            })
        })
        .collect();
    out.emit(json!(summary), || {
        let refs: Vec<&EvalReport> = reports.iter().collect();
        EvalReport::table(&refs)
    });
    Ok(())
}
