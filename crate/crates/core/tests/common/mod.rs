//! Toy end-to-end pipeline shared by the slow integration tests: a synthetic
//! two-style corpus, a desk-scale LM trained on it and a cue/dialogue head.

#![allow(dead_code)]

use std::time::Instant;

use cuegen_core::attributes::{train_head, HeadHyper, HeadMode, HeadReport, LabeledText, LinearHead};
use cuegen_core::corpus::{parse_script, split, Script, SplitSpec};
use cuegen_core::synthetic::{two_style_scripts, SyntheticSpec};
use cuegen_core::textmodel::{scene_sequences, train_lm, train_tokenizer, Checkpoint, LMConfig, TrainHyper, TrainReport};

pub struct Toy {
    pub ck: Checkpoint<f32>,
    pub lm_report: TrainReport,
    pub head: LinearHead,
    pub head_report: HeadReport,
    pub train: Vec<Script>,
    pub test: Vec<Script>,
    pub attribute_data: Vec<LabeledText>,
    pub seconds: f64,
}

pub const CUE: usize = 1;

pub fn toy_config(vocab_size: usize) -> LMConfig {
    LMConfig { layers: 2, heads: 4, d_model: 64, context: 64, vocab_size, d_ff: 128, seed: 11 }
}

pub fn build_toy(scripts: usize, steps: usize) -> Toy {
    let t0 = Instant::now();
    let raw = two_style_scripts(&SyntheticSpec { scripts, seed: 7, ..Default::default() });
    let parsed: Vec<Script> = raw.iter().map(|r| parse_script(r).expect("synthetic script parses")).collect();
    let parts = split(parsed, &SplitSpec { fractions: (0.8, 0.1, 0.1), seed: 3 }).unwrap();

    let texts: Vec<String> = parts.train.iter().flat_map(|s| s.lines().map(|l| l.model_text())).collect();
    let vocab = train_tokenizer(texts.iter().map(|s| s.as_str()), 2000).unwrap();
    let seqs = scene_sequences(&parts.train, &vocab);
    let hyper = TrainHyper { steps, lr: 3e-3, batch: 16, seed: 5, val_fraction: 0.1, clip: 1.0, warmup: 30 };
    let (ck, lm_report) = train_lm::<f32>(&seqs, &vocab, toy_config(vocab.len()), &hyper).unwrap();

    let data: Vec<LabeledText> = parts
        .attribute
        .iter()
        .flat_map(|s| s.lines())
        .map(|l| LabeledText { text: l.model_text(), labels: vec![l.is_cue() as usize] })
        .collect();
    let (head, head_report) = cue_head(&ck, &data, HEAD_L2);
    Toy { ck, lm_report, head, head_report, train: parts.train, test: parts.test, attribute_data: data, seconds: t0.elapsed().as_secs_f64() }
}

pub const HEAD_L2: f64 = 1e-4;

pub fn cue_head(ck: &Checkpoint<f32>, data: &[LabeledText], l2: f64) -> (LinearHead, HeadReport) {
    train_head(
        data,
        &ck.model,
        &ck.vocab,
        vec!["dialogue".into(), "cue".into()],
        HeadMode::Softmax,
        &HeadHyper { seed: 1, l2, ..Default::default() },
    )
    .unwrap()
}
