//! A generated corpus for pre-training, probing and synonym robustness.
//!
//! Every sentence carries one cue from family A and one from family B. Each
//! family has "up" and "down" cues, and the class is whether exactly one of
//! the two cues is "up". Bag-of-words features alone cannot separate the
//! classes. Pre-training sentences also carry topic words chosen by the
//! class, so a model that learns to predict them has to compose the cues.
//! Cues appear under a synonym some of the time in pre-training text, while
//! probe sentences always use the canonical form.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{Example, SynonymTable};
use crate::seed::{derive_rng, Purpose};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Cues per family and polarity.
    pub cues: usize,
    pub topics_per_class: usize,
    pub fillers: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub pretrain_sentences: usize,
    pub heldout_sentences: usize,
    pub probe_examples: usize,
    /// Chance that a cue in pre-training text is written as its synonym.
    pub synonym_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cues: 2,
            topics_per_class: 6,
            fillers: 60,
            min_fillers: 3,
            max_fillers: 8,
            pretrain_sentences: 4000,
            heldout_sentences: 400,
            probe_examples: 1200,
            synonym_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub pretrain: Vec<String>,
    pub heldout: Vec<String>,
    pub probe: Vec<Example>,
    pub synonyms: SynonymTable,
}

struct Lexicon {
    /// `cues[family][up as usize]`
    cues: [[Vec<String>; 2]; 2],
    topics: [Vec<String>; 2],
    fillers: Vec<String>,
}

fn synonym_of(cue: &str) -> String {
    format!("{cue}x")
}

impl Lexicon {
    fn new(c: &SynthConfig) -> Self {
        let words = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        Lexicon {
            cues: [[words("ru", c.cues), words("ra", c.cues)], [words("su", c.cues), words("sa", c.cues)]],
            topics: [words("ti", c.topics_per_class), words("te", c.topics_per_class)],
            fillers: words("w", c.fillers),
        }
    }

    fn sentence<R: Rng>(&self, c: &SynthConfig, label: usize, pretrain: bool, rng: &mut R) -> String {
        let a_up = rng.random_bool(0.5);
        let b_up = a_up ^ (label == 1);
        let mut words: Vec<String> = Vec::new();
        for (family, up) in [(0, a_up), (1, b_up)] {
            let cue = self.cues[family][up as usize].choose(rng).expect("cues").clone();
            words.push(if pretrain && rng.random_bool(c.synonym_rate) {
                synonym_of(&cue)
            } else {
                cue
            });
        }
        if pretrain {
            words.push(self.topics[label].choose(rng).expect("topics").clone());
        }
        for _ in 0..rng.random_range(c.min_fillers..=c.max_fillers) {
            words.push(self.fillers.choose(rng).expect("fillers").clone());
        }
        words.shuffle(rng);
        words.join(" ")
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.cues == 0 || config.topics_per_class == 0 || config.fillers == 0 {
        return Err(Error::Config(vec!["synthetic lexicon sizes must be positive".into()]));
    }
    if config.min_fillers > config.max_fillers || !(0.0..=1.0).contains(&config.synonym_rate) {
        return Err(Error::Config(vec!["bad filler range or synonym_rate".into()]));
    }
    let lex = Lexicon::new(config);
    let mut rng = derive_rng(config.seed, Purpose::Synthetic, 0, 0);
    let text = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        (0..n).map(|_| lex.sentence(config, rng.random_range(0..2), true, rng)).collect()
    };
    let pretrain = text(config.pretrain_sentences, &mut rng);
    let heldout = text(config.heldout_sentences, &mut rng);
    let probe = (0..config.probe_examples)
        .map(|i| Example {
            label: i % 2,
            text: lex.sentence(config, i % 2, false, &mut rng),
        })
        .collect();
    let synonyms = SynonymTable::new(
        lex.cues
            .iter()
            .flatten()
            .flatten()
            .map(|cue| (cue.clone(), vec![synonym_of(cue)])),
    )?;
    Ok(SynthCorpus {
        pretrain,
        heldout,
        probe,
        synonyms,
    })
}

impl SynthCorpus {
    /// Writes `pretrain.txt`, `heldout.txt`, `probe.tsv` and `synonyms.tsv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, lines) in [("pretrain.txt", &self.pretrain), ("heldout.txt", &self.heldout)] {
            let path = dir.join(name);
            let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Example::write_tsv(&dir.join("probe.tsv"), &self.probe)?;
        self.synonyms.save(&dir.join("synonyms.tsv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            pretrain_sentences: 200,
            heldout_sentences: 20,
            probe_examples: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn labels_follow_the_cue_parity() {
        let corpus = generate(&small()).unwrap();
        for ex in &corpus.probe {
            let ups = ex.text.split(' ').filter(|w| w.starts_with("ra") || w.starts_with("sa")).count();
            assert_eq!(ups % 2, ex.label, "{}", ex.text);
            assert!(!ex.text.contains('x') && !ex.text.contains('t'));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate(&other).unwrap().pretrain, generate(&small()).unwrap().pretrain);
    }

    #[test]
    fn synonyms_cover_every_cue() {
        let corpus = generate(&small()).unwrap();
        assert_eq!(corpus.synonyms.len(), 8);
        assert_eq!(corpus.synonyms.get("ra1").unwrap(), ["ra1x".to_string()]);
        assert!(corpus.pretrain.iter().any(|s| s.contains("x ") || s.ends_with('x')));
    }
}
