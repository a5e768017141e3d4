#![allow(dead_code)]

use irlm_core::model::ModelConfig;
use irlm_core::synth::{generate, SynthConfig, SynthCorpus};
use irlm_core::text::{encode, TokenSequence, Vocab, WhitespaceTokenizer};
use irlm_core::trainer::TrainConfig;

pub const MAX_LEN: usize = 24;

pub struct Fixture {
    pub corpus: SynthCorpus,
    pub vocab: Vocab,
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
}

pub fn synth_config(pretrain: usize) -> SynthConfig {
    SynthConfig {
        fillers: 20,
        min_fillers: 2,
        max_fillers: 5,
        pretrain_sentences: pretrain,
        heldout_sentences: 200,
        probe_examples: 1200,
        ..SynthConfig::default()
    }
}

pub fn fixture(pretrain: usize) -> Fixture {
    let corpus = generate(&synth_config(pretrain)).unwrap();
    let vocab = Vocab::from_lines(corpus.pretrain.iter().map(String::as_str), &WhitespaceTokenizer, 1, 1000).unwrap();
    let enc = |lines: &[String]| lines.iter().map(|l| encode(l, &vocab, MAX_LEN)).collect::<Vec<_>>();
    let train = enc(&corpus.pretrain);
    let heldout = enc(&corpus.heldout);
    Fixture {
        corpus,
        vocab,
        train,
        heldout,
    }
}

pub fn tiny_model(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size,
        max_len: MAX_LEN,
        dropout_rate: 0.1,
        seed,
    }
}

pub fn train_config(total_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        batch_size: 16,
        learning_rate: 2e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// Metrics CSV with the wall-clock column removed.
pub fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}
