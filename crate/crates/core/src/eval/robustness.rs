use std::fs;
use std::path::Path;

use super::probe::{fit_probe, Example, Probe, ProbeConfig, ProbeTask};
use super::synonyms::{is_sound_substitution, synonym_swap, SynonymTable};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::{derive_rng, Purpose};
use crate::tensor::Scalar;
use crate::text::Vocab;

pub const ROBUSTNESS_HEADER: &str = "run,transform,n_examples,original_acc,transformed_acc,delta,altered_fraction";

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessConfig {
    pub probe: ProbeConfig,
    pub swap_fraction: f64,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            probe: ProbeConfig::default(),
            swap_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub transform: String,
    pub n_examples: usize,
    pub original: f64,
    pub transformed: f64,
    /// `transformed - original`.
    pub delta: f64,
    pub altered_fraction: f64,
    /// Transformed examples whose edits are not all table-listed.
    pub unsound: usize,
}

/// Scores a fitted probe on `test` and on its synonym-swapped copy.
pub fn robustness_of<T: Scalar>(
    probe: &Probe<T>,
    vocab: &Vocab,
    test: &[Example],
    table: &SynonymTable,
    swap_fraction: f64,
    seed: u64,
) -> Result<(RobustnessReport, Vec<Example>)> {
    if test.is_empty() {
        return Err(Error::domain("robustness", "empty test set"));
    }
    let mut rng = derive_rng(seed, Purpose::Synonyms, 0, 0);
    let swapped = synonym_swap(test, table, &mut rng, swap_fraction);
    let altered = test.iter().zip(&swapped).filter(|(a, b)| a.text != b.text).count();
    let unsound = test
        .iter()
        .zip(&swapped)
        .filter(|(a, b)| !is_sound_substitution(&a.text, &b.text, table))
        .count();
    let original = probe.accuracy(vocab, test)?;
    let transformed = probe.accuracy(vocab, &swapped)?;
    let report = RobustnessReport {
        transform: "synonym_swap".to_string(),
        n_examples: test.len(),
        original,
        transformed,
        delta: transformed - original,
        altered_fraction: altered as f64 / test.len() as f64,
        unsound,
    };
    Ok((report, swapped))
}

/// Fits a probe on `task` and measures its accuracy change under synonym swaps of the test split.
pub fn robustness_eval<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    task: &ProbeTask,
    table: &SynonymTable,
    config: &RobustnessConfig,
) -> Result<RobustnessReport> {
    let probe = fit_probe(model, vocab, task, &config.probe)?;
    Ok(robustness_of(&probe, vocab, &task.test_examples(), table, config.swap_fraction, config.seed)?.0)
}

pub fn write_robustness_csv(path: &Path, rows: &[(String, RobustnessReport)]) -> Result<()> {
    let mut out = format!("{ROBUSTNESS_HEADER}\n");
    for (run, r) in rows {
        out.push_str(&format!(
            "{run},{},{},{},{},{},{}\n",
            r.transform, r.n_examples, r.original, r.transformed, r.delta, r.altered_fraction
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
