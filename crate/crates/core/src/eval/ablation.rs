use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::mlm::mlm_eval;
use super::probe::{probe_train_eval, ProbeConfig, ProbeTask};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Scalar;
use crate::text::{TokenSequence, Vocab};
use crate::trainer::{RunLayout, TrainConfig, Trainer};

pub const ABLATION_HEADER: &str = "variant,seed,mlm_loss,mlm_acc,probe_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoEcp,
    NoDpp,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoEcp, Variant::NoDpp, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full_ir",
            Variant::NoEcp => "no_ecp",
            Variant::NoDpp => "no_dpp",
            Variant::Baseline => "baseline",
        }
    }

    /// `base` with this variant's regularizer weights zeroed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if matches!(self, Variant::NoEcp | Variant::Baseline) {
            c.regularizer.weight_ecp = 0.0;
        }
        if matches!(self, Variant::NoDpp | Variant::Baseline) {
            c.regularizer.weight_dpp = 0.0;
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub mlm_loss: f64,
    pub mlm_acc: f64,
    pub probe_acc: f64,
}

/// Everything shared by the cells of the grid. Each seed sets the model
/// initialisation, the training streams and the probe.
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub corpus: &'a [TokenSequence],
    pub heldout: &'a [TokenSequence],
    pub vocab: &'a Vocab,
    pub task: &'a ProbeTask,
    pub seeds: Vec<u64>,
    pub eval_seed: u64,
    /// Each run writes metrics and checkpoints to `<dir>/<variant>_seed<seed>`.
    pub out_dir: Option<PathBuf>,
}

impl AblationSetup<'_> {
    pub fn run_dir(&self, variant: Variant, seed: u64) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(format!("{variant}_seed{seed}")))
    }
}

pub fn ablation_grid<T: Scalar>(setup: &AblationSetup<'_>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4 * setup.seeds.len());
    for variant in Variant::ALL {
        for &seed in &setup.seeds {
            let mut train = variant.apply(&setup.train);
            train.seed = seed;
            let model = ModelConfig {
                seed,
                ..setup.model.clone()
            };
            let mut trainer =
                Trainer::<T>::new(model, train, setup.corpus.to_vec(), setup.heldout.to_vec())?;
            let layout = setup.run_dir(variant, seed).map(RunLayout::new);
            trainer.run(layout.as_ref(), None)?;
            let mlm = mlm_eval(&trainer.model, setup.heldout, &setup.train.ennoise, setup.eval_seed, 32)?;
            let probe = ProbeConfig {
                seed,
                ..setup.probe.clone()
            };
            let probe_acc = probe_train_eval(&trainer.model, setup.vocab, setup.task, &probe)?;
            log::info!("{variant} seed {seed}: mlm_loss {:.4} mlm_acc {:.4} probe_acc {:.4}", mlm.loss, mlm.accuracy, probe_acc);
            rows.push(AblationRow {
                variant,
                seed,
                mlm_loss: mlm.loss,
                mlm_acc: mlm.accuracy,
                probe_acc,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.variant, r.seed, r.mlm_loss, r.mlm_acc, r.probe_acc));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-variant means of `(mlm_loss, mlm_acc, probe_acc)`, in grid order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(Variant, f64, f64, f64)> {
    Variant::ALL
        .iter()
        .filter_map(|&v| {
            let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            if cell.is_empty() {
                return None;
            }
            let n = cell.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| cell.iter().map(|r| f(r)).sum::<f64>() / n;
            Some((v, mean(|r| r.mlm_loss), mean(|r| r.mlm_acc), mean(|r| r.probe_acc)))
        })
        .collect()
}
