//! `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use irlm_core::ennoise::EnnoiseConfig;
use irlm_core::eval::{ProbeConfig, ProbeMode};
use irlm_core::model::ModelConfig;
use irlm_core::regularizer::{Distance, PositionSet};
use irlm_core::synth::SynthConfig;
use irlm_core::text::{DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};
use irlm_core::trainer::{Precision, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub eval_seed: u64,
    pub eval_batch_size: usize,
    pub swap_fraction: f64,
    pub ablation_seeds: Vec<u64>,
    pub vocab_min_frequency: usize,
    pub vocab_max_size: usize,
    pub synth: SynthConfig,
    pub corpus: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub probe_data: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                max_len: DEFAULT_MAX_LEN,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            validation_fraction: 0.2,
            test_fraction: 0.3,
            eval_seed: 1234,
            eval_batch_size: 32,
            swap_fraction: 1.0,
            ablation_seeds: vec![0, 1, 2],
            vocab_min_frequency: 1,
            vocab_max_size: DEFAULT_VOCAB_SIZE,
            synth: SynthConfig::default(),
            corpus: None,
            heldout: None,
            vocab: None,
            probe_data: None,
            synonyms: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>()))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.train.precision = v.parse::<Precision>()?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.dropout" => self.model.dropout_rate = parse(key, v)?,
            "train.total_steps" => self.train.total_steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.warmup_fraction" => self.train.warmup_fraction = parse(key, v)?,
            "train.checkpoint_interval" => self.train.checkpoint_interval = parse(key, v)?,
            "train.eval_interval" => self.train.eval_interval = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "reg.weight_ecp" => self.train.regularizer.weight_ecp = parse(key, v)?,
            "reg.weight_dpp" => self.train.regularizer.weight_dpp = parse(key, v)?,
            "reg.detach_original" => self.train.regularizer.detach_original = parse(key, v)?,
            "reg.detach_filled" => self.train.regularizer.detach_filled = parse(key, v)?,
            "reg.eps_kl" => self.train.regularizer.eps_kl = parse(key, v)?,
            "reg.swap_kl_direction" => self.train.regularizer.swap_kl_direction = parse(key, v)?,
            "reg.distance" => {
                self.train.regularizer.distance = match v {
                    "kl" => Distance::Kl,
                    "mse" => Distance::Mse,
                    _ => return Err(format!("{key}: expected kl or mse, got {v:?}")),
                }
            }
            "reg.positions" => {
                self.train.regularizer.positions = match v {
                    "non_padded" => PositionSet::NonPadded,
                    "masked_only" => PositionSet::MaskedOnly,
                    _ => return Err(format!("{key}: expected non_padded or masked_only, got {v:?}")),
                }
            }
            "ennoise.mask_ratio" => self.train.ennoise.mask_ratio = parse(key, v)?,
            "ennoise.p_mask" => self.train.ennoise.p_mask = parse(key, v)?,
            "ennoise.p_random" => self.train.ennoise.p_random = parse(key, v)?,
            "ennoise.p_keep" => self.train.ennoise.p_keep = parse(key, v)?,
            "ennoise.dynamic" => self.train.ennoise.dynamic = parse(key, v)?,
            "probe.mode" => {
                self.probe.mode = match v {
                    "frozen" => ProbeMode::Frozen,
                    "fine_tune" => ProbeMode::FineTune,
                    _ => return Err(format!("{key}: expected frozen or fine_tune, got {v:?}")),
                }
            }
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.learning_rate" => self.probe.learning_rate = parse(key, v)?,
            "probe.batch_size" => self.probe.batch_size = parse(key, v)?,
            "probe.validation_fraction" => self.validation_fraction = parse(key, v)?,
            "probe.test_fraction" => self.test_fraction = parse(key, v)?,
            "eval.seed" => self.eval_seed = parse(key, v)?,
            "eval.batch_size" => self.eval_batch_size = parse(key, v)?,
            "eval.swap_fraction" => self.swap_fraction = parse(key, v)?,
            "ablation.seeds" => {
                self.ablation_seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "vocab.min_frequency" => self.vocab_min_frequency = parse(key, v)?,
            "vocab.max_size" => self.vocab_max_size = parse(key, v)?,
            "synth.pretrain_sentences" => self.synth.pretrain_sentences = parse(key, v)?,
            "synth.heldout_sentences" => self.synth.heldout_sentences = parse(key, v)?,
            "synth.probe_examples" => self.synth.probe_examples = parse(key, v)?,
            "synth.fillers" => self.synth.fillers = parse(key, v)?,
            "synth.synonym_rate" => self.synth.synonym_rate = parse(key, v)?,
            "data.corpus" => self.corpus = path(v),
            "data.heldout" => self.heldout = path(v),
            "data.vocab" => self.vocab = path(v),
            "data.probe" => self.probe_data = path(v),
            "data.synonyms" => self.synonyms = path(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.train.regularizer;
        let e: &EnnoiseConfig = &self.train.ennoise;
        vec![
            ("seed", self.seed.to_string()),
            ("precision", self.train.precision.to_string()),
            ("model.n_layers", self.model.n_layers.to_string()),
            ("model.n_heads", self.model.n_heads.to_string()),
            ("model.d_model", self.model.d_model.to_string()),
            ("model.d_ff", self.model.d_ff.to_string()),
            ("model.max_len", self.model.max_len.to_string()),
            ("model.dropout", self.model.dropout_rate.to_string()),
            ("train.total_steps", self.train.total_steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.warmup_fraction", self.train.warmup_fraction.to_string()),
            ("train.checkpoint_interval", self.train.checkpoint_interval.to_string()),
            ("train.eval_interval", self.train.eval_interval.to_string()),
            ("train.grad_clip", self.train.grad_clip.to_string()),
            ("train.weight_decay", self.train.adam.weight_decay.to_string()),
            ("reg.weight_ecp", r.weight_ecp.to_string()),
            ("reg.weight_dpp", r.weight_dpp.to_string()),
            ("reg.detach_original", r.detach_original.to_string()),
            ("reg.detach_filled", r.detach_filled.to_string()),
            ("reg.eps_kl", r.eps_kl.to_string()),
            ("reg.swap_kl_direction", r.swap_kl_direction.to_string()),
            (
                "reg.distance",
                match r.distance {
                    Distance::Kl => "kl",
                    Distance::Mse => "mse",
                }
                .into(),
            ),
            (
                "reg.positions",
                match r.positions {
                    PositionSet::NonPadded => "non_padded",
                    PositionSet::MaskedOnly => "masked_only",
                }
                .into(),
            ),
            ("ennoise.mask_ratio", e.mask_ratio.to_string()),
            ("ennoise.p_mask", e.p_mask.to_string()),
            ("ennoise.p_random", e.p_random.to_string()),
            ("ennoise.p_keep", e.p_keep.to_string()),
            ("ennoise.dynamic", e.dynamic.to_string()),
            (
                "probe.mode",
                match self.probe.mode {
                    ProbeMode::Frozen => "frozen",
                    ProbeMode::FineTune => "fine_tune",
                }
                .into(),
            ),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.learning_rate", self.probe.learning_rate.to_string()),
            ("probe.batch_size", self.probe.batch_size.to_string()),
            ("probe.validation_fraction", self.validation_fraction.to_string()),
            ("probe.test_fraction", self.test_fraction.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            ("eval.swap_fraction", self.swap_fraction.to_string()),
            ("ablation.seeds", list(&self.ablation_seeds)),
            ("vocab.min_frequency", self.vocab_min_frequency.to_string()),
            ("vocab.max_size", self.vocab_max_size.to_string()),
            ("synth.pretrain_sentences", self.synth.pretrain_sentences.to_string()),
            ("synth.heldout_sentences", self.synth.heldout_sentences.to_string()),
            ("synth.probe_examples", self.synth.probe_examples.to_string()),
            ("synth.fillers", self.synth.fillers.to_string()),
            ("synth.synonym_rate", self.synth.synonym_rate.to_string()),
            ("data.corpus", show_path(&self.corpus)),
            ("data.heldout", show_path(&self.heldout)),
            ("data.vocab", show_path(&self.vocab)),
            ("data.probe", show_path(&self.probe_data)),
            ("data.synonyms", show_path(&self.synonyms)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment. Every bad line is
    /// reported, not just the first.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let result = match line.split_once('=') {
                Some((k, v)) => self.set(k.trim(), v),
                None => Err(format!("expected key = value, got {line:?}")),
            };
            if let Err(e) = result {
                problems.push(format!("{}:{}: {e}", origin.display(), n + 1));
            }
        }
        problems
    }

    /// Copies the run seed into the model, trainer and probe, and checks
    /// every section.
    pub fn finish(&mut self) -> Vec<String> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
        self.synth.seed = self.seed;
        let mut problems = self.train.validate();
        let mut model = self.model.clone();
        // the vocabulary size is only known once the vocabulary is loaded
        model.vocab_size = model.vocab_size.max(irlm_core::text::NUM_SPECIAL + 1);
        problems.extend(model.validate());
        if self.probe.epochs == 0 || self.probe.batch_size == 0 {
            problems.push("probe.epochs and probe.batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.swap_fraction) {
            problems.push(format!("eval.swap_fraction must be in [0, 1], got {}", self.swap_fraction));
        }
        if self.validation_fraction <= 0.0 || self.test_fraction <= 0.0 || self.validation_fraction + self.test_fraction >= 1.0 {
            problems.push("probe.validation_fraction and probe.test_fraction must be positive and sum below 1".into());
        }
        if self.ablation_seeds.is_empty() {
            problems.push("ablation.seeds must list at least one seed".into());
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("reg.distance", "mse").unwrap();
        c.set("ablation.seeds", "4, 5").unwrap();
        c.set("data.corpus", "a/b.txt").unwrap();
        let mut back = RunConfig::default();
        assert!(back.apply_text(&c.to_text(), Path::new("x")).is_empty());
        assert_eq!(back, c);
    }

    #[test]
    fn every_bad_line_is_reported() {
        let mut c = RunConfig::default();
        let problems = c.apply_text("seed = 3\nbogus = 1\ntrain.total_steps = many\nno equals sign\n", Path::new("run.cfg"));
        assert_eq!(problems.len(), 3);
        assert!(problems[0].starts_with("run.cfg:2:"));
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("# header\n\nseed = 9  # trailing\n", Path::new("x")).is_empty());
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn finish_validates_sections() {
        let mut c = RunConfig::default();
        c.set("train.warmup_fraction", "1.5").unwrap();
        c.set("model.n_heads", "3").unwrap();
        assert_eq!(c.finish().len(), 2);
    }
}
