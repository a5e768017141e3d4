use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use irlm_core::checkpoint;
use irlm_core::eval::{
    ablation_grid, curve_export, fit_probe, mlm_eval, read_metrics, robustness_of, summarize, write_ablation_csv,
    write_curves, write_robustness_csv, AblationSetup, Example, ProbeTask, SynonymTable,
};
use irlm_core::model::{Model, ModelConfig};
use irlm_core::synth;
use irlm_core::tensor::Scalar;
use irlm_core::text::{build_vocab, encode, read_corpus, TokenSequence, Vocab};
use irlm_core::trainer::{Precision, RunLayout, Trainer};

use crate::config::RunConfig;
use crate::{Command, Failure};

fn need<'a>(slot: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path, Failure> {
    slot.as_deref()
        .ok_or_else(|| Failure::Usage(format!("no {key} given: pass {flag} or set {key}")))
}

fn sequences(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSequence>, Failure> {
    Ok(read_corpus(path)?.iter().map(|l| encode(l, vocab, max_len)).collect())
}

fn model_config(cfg: &RunConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

fn probe_task(cfg: &RunConfig) -> Result<ProbeTask, Failure> {
    let path = need(&cfg.probe_data, "data.probe", "--probe")?;
    let examples = Example::read_tsv(path)?;
    Ok(ProbeTask::stratified(examples, cfg.validation_fraction, cfg.test_fraction, cfg.seed)?)
}

fn load_checkpoint<T: Scalar>(path: &Path, vocab: &Vocab) -> Result<Model<T>, Failure> {
    if !path.exists() {
        return Err(Failure::Runtime(anyhow::anyhow!("checkpoint {} does not exist", path.display())));
    }
    let (model, _) = checkpoint::load::<T>(path)?;
    if model.config.vocab_size != vocab.len() {
        return Err(Failure::Usage(format!(
            "checkpoint {} expects a vocabulary of {} tokens, the vocabulary file has {}",
            path.display(),
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

pub fn dispatch(command: &Command, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    match cfg.train.precision {
        Precision::Single => run::<f32>(command, cfg, out),
        Precision::Double => run::<f64>(command, cfg, out),
    }
}

fn run<T: Scalar>(command: &Command, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    match command {
        Command::BuildVocab { .. } => build(cfg, out),
        Command::Pretrain { resume, .. } => pretrain::<T>(cfg, out, resume.as_deref()),
        Command::Evaluate { checkpoint, .. } => evaluate::<T>(cfg, out, checkpoint),
        Command::Ablate { .. } => ablate::<T>(cfg, out),
        Command::Robustness { checkpoint, .. } => robustness::<T>(cfg, out, checkpoint),
        Command::Curves { runs, metrics, steps } => curves(out, runs, metrics, steps),
        Command::Synth => {
            let corpus = synth::generate(&cfg.synth)?;
            corpus.write_to(out)?;
            println!(
                "wrote {} pre-training, {} held-out and {} probe sentences to {}",
                corpus.pretrain.len(),
                corpus.heldout.len(),
                corpus.probe.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn build(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let corpus = need(&cfg.corpus, "data.corpus", "--corpus")?;
    let vocab = build_vocab(corpus, cfg.vocab_min_frequency, cfg.vocab_max_size)?;
    let path = out.join("vocab.txt");
    vocab.save(&path)?;
    println!("vocab size {} written to {}", vocab.len(), path.display());
    Ok(())
}

fn pretrain<T: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let vocab = Vocab::load(need(&cfg.vocab, "data.vocab", "--vocab")?)?;
    let corpus = sequences(need(&cfg.corpus, "data.corpus", "--corpus")?, &vocab, cfg.model.max_len)?;
    let heldout = match &cfg.heldout {
        Some(p) => sequences(p, &vocab, cfg.model.max_len)?,
        None => Vec::new(),
    };
    let mut trainer = match resume {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Runtime(anyhow::anyhow!("checkpoint {} does not exist", path.display())));
            }
            Trainer::<T>::resume(path, cfg.train.clone(), corpus, heldout)?
        }
        None => Trainer::<T>::new(model_config(cfg, &vocab), cfg.train.clone(), corpus, heldout)?,
    };
    let layout = RunLayout::new(out);
    let rows = trainer.run(Some(&layout), None)?;
    match rows.last() {
        Some(last) => println!(
            "step {}: l_dae {:.4} l_ecp {:.4} l_dpp {:.4} l_total {:.4}; final checkpoint {}",
            last.step,
            last.l_dae,
            last.l_ecp,
            last.l_dpp,
            last.l_total,
            layout.final_checkpoint().display()
        ),
        None => println!("nothing to do: already at step {}", trainer.completed_steps()),
    }
    Ok(())
}

fn evaluate<T: Scalar>(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let vocab = Vocab::load(need(&cfg.vocab, "data.vocab", "--vocab")?)?;
    let model = load_checkpoint::<T>(checkpoint, &vocab)?;
    let heldout = sequences(need(&cfg.heldout, "data.heldout", "--heldout")?, &vocab, model.config.max_len)?;
    let mlm = mlm_eval(&model, &heldout, &cfg.train.ennoise, cfg.eval_seed, cfg.eval_batch_size)?;
    let probe_acc = match cfg.probe_data {
        Some(_) => {
            let task = probe_task(cfg)?;
            let probe = fit_probe(&model, &vocab, &task, &cfg.probe)?;
            Some(probe.accuracy(&vocab, &task.test_examples())?)
        }
        None => None,
    };
    let path = out.join("evaluation.csv");
    let probe_field = probe_acc.map(|a| a.to_string()).unwrap_or_default();
    fs::write(
        &path,
        format!(
            "checkpoint,mlm_loss,mlm_acc,masked_positions,probe_acc\n{},{},{},{},{probe_field}\n",
            checkpoint.display(),
            mlm.loss,
            mlm.accuracy,
            mlm.masked_positions
        ),
    )
    .with_context(|| format!("writing {}", path.display()))?;
    println!("mlm_loss {:.4} mlm_acc {:.4}", mlm.loss, mlm.accuracy);
    if let Some(a) = probe_acc {
        println!("probe_acc {a:.4}");
    }
    Ok(())
}

fn ablate<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let vocab = Vocab::load(need(&cfg.vocab, "data.vocab", "--vocab")?)?;
    let corpus = sequences(need(&cfg.corpus, "data.corpus", "--corpus")?, &vocab, cfg.model.max_len)?;
    let heldout = sequences(need(&cfg.heldout, "data.heldout", "--heldout")?, &vocab, cfg.model.max_len)?;
    let task = probe_task(cfg)?;
    let setup = AblationSetup {
        model: model_config(cfg, &vocab),
        train: cfg.train.clone(),
        probe: cfg.probe.clone(),
        corpus: &corpus,
        heldout: &heldout,
        vocab: &vocab,
        task: &task,
        seeds: cfg.ablation_seeds.clone(),
        eval_seed: cfg.eval_seed,
        out_dir: Some(out.join("ablation")),
    };
    let rows = ablation_grid::<T>(&setup)?;
    let path = out.join("ablation.csv");
    write_ablation_csv(&path, &rows)?;
    println!("{:<10} {:>9} {:>8} {:>9}", "variant", "mlm_loss", "mlm_acc", "probe_acc");
    let summary = summarize(&rows);
    for (v, loss, acc, probe) in &summary {
        println!("{:<10} {loss:>9.4} {acc:>8.4} {probe:>9.4}", v.name());
    }
    if let [full, no_ecp, no_dpp, _] = summary.as_slice() {
        let holds = full.3 >= no_ecp.3 && full.3 >= no_dpp.3;
        println!("full IR probe mean >= each single-term ablation: {}", if holds { "yes" } else { "no" });
    }
    println!("{} rows written to {}", rows.len(), path.display());
    Ok(())
}

fn named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) => (name.to_string(), PathBuf::from(path)),
        None => (spec.to_string(), PathBuf::from(spec)),
    }
}

fn robustness<T: Scalar>(cfg: &RunConfig, out: &Path, checkpoints: &[String]) -> Result<(), Failure> {
    let vocab = Vocab::load(need(&cfg.vocab, "data.vocab", "--vocab")?)?;
    let table = SynonymTable::load(need(&cfg.synonyms, "data.synonyms", "--synonyms")?)?;
    let task = probe_task(cfg)?;
    let test = task.test_examples();
    let mut reports = Vec::new();
    for spec in checkpoints {
        let (name, path) = named(spec);
        let model = load_checkpoint::<T>(&path, &vocab)?;
        let probe = fit_probe(&model, &vocab, &task, &cfg.probe)?;
        let (report, _) = robustness_of(&probe, &vocab, &test, &table, cfg.swap_fraction, cfg.seed)?;
        println!(
            "{name}: original {:.4} transformed {:.4} delta {:+.4} altered {:.2}",
            report.original, report.transformed, report.delta, report.altered_fraction
        );
        reports.push((name, report));
    }
    write_robustness_csv(&out.join("robustness.csv"), &reports)?;
    Ok(())
}

fn curves(out: &Path, runs: &[String], metrics: &[String], steps: &[usize]) -> Result<(), Failure> {
    let mut tables = Vec::new();
    for spec in runs {
        let Some((name, path)) = spec.split_once('=') else {
            return Err(Failure::Usage(format!("--run expects NAME=PATH, got {spec:?}")));
        };
        tables.push((name.to_string(), read_metrics(Path::new(path))?));
    }
    let metrics: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let export = curve_export(&tables, &metrics, (!steps.is_empty()).then_some(steps))?;
    for w in &export.warnings {
        log::warn!("{w}");
        eprintln!("warning: {w}");
    }
    let path = out.join("curves.csv");
    write_curves(&path, &export.rows)?;
    println!("{} rows written to {}", export.rows.len(), path.display());
    Ok(())
}
