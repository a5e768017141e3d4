mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "irlm", version, about = "Masked-LM pre-training with instance regularization")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long, global = true, value_parser = ["single", "double"])]
    precision: Option<String>,
    /// Override a configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary file from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Pre-train an encoder.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Train with both regularizer weights set to 0.
        #[arg(long)]
        baseline: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out MLM metrics and, given probe data, probe accuracy.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Train and evaluate the full, -ECP, -DPP and baseline variants.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Probe accuracy before and after synonym substitution.
    Robustness {
        /// `PATH` or `NAME=PATH`; may be repeated.
        #[arg(long, required = true)]
        checkpoint: Vec<String>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Align metrics files into one long-format CSV.
    Curves {
        /// `NAME=PATH` of a metrics CSV; may be repeated.
        #[arg(long = "run", required = true, value_name = "NAME=PATH")]
        runs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "l_total")]
        metrics: Vec<String>,
        /// Steps to keep; all shared steps if omitted.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
    },
    /// Write the synthetic corpus, probe task and synonym table.
    Synth,
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<irlm_core::Error> for Failure {
    fn from(e: irlm_core::Error) -> Self {
        match e {
            irlm_core::Error::Config(problems) => Failure::Usage(problems.join("\n")),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let mut problems = Vec::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        problems.extend(cfg.apply_text(&text, path));
    }
    for kv in &cli.set {
        match kv.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = cfg.set(k.trim(), v) {
                    problems.push(format!("--set {kv}: {e}"));
                }
            }
            None => problems.push(format!("--set expects KEY=VALUE, got {kv:?}")),
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.precision {
        cfg.set("precision", p).map_err(Failure::Usage)?;
    }
    match &cli.command {
        Command::BuildVocab { corpus } => override_path(&mut cfg.corpus, corpus),
        Command::Pretrain {
            corpus,
            vocab,
            heldout,
            baseline,
            ..
        } => {
            override_path(&mut cfg.corpus, corpus);
            override_path(&mut cfg.vocab, vocab);
            override_path(&mut cfg.heldout, heldout);
            if *baseline {
                cfg.train.regularizer.weight_ecp = 0.0;
                cfg.train.regularizer.weight_dpp = 0.0;
            }
        }
        Command::Evaluate {
            vocab, heldout, probe, ..
        } => {
            override_path(&mut cfg.vocab, vocab);
            override_path(&mut cfg.heldout, heldout);
            override_path(&mut cfg.probe_data, probe);
        }
        Command::Ablate {
            corpus,
            heldout,
            vocab,
            probe,
        } => {
            override_path(&mut cfg.corpus, corpus);
            override_path(&mut cfg.heldout, heldout);
            override_path(&mut cfg.vocab, vocab);
            override_path(&mut cfg.probe_data, probe);
        }
        Command::Robustness {
            vocab, probe, synonyms, ..
        } => {
            override_path(&mut cfg.vocab, vocab);
            override_path(&mut cfg.probe_data, probe);
            override_path(&mut cfg.synonyms, synonyms);
        }
        Command::Curves { .. } | Command::Synth => {}
    }
    problems.extend(cfg.finish());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Usage(format!("invalid configuration:\n  {}", problems.join("\n  "))))
    }
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli)?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot create {}: {e}", cli.out.display())))?;
    let echo = cli.out.join("config.txt");
    fs::write(&echo, cfg.to_text())
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot write {}: {e}", echo.display())))?;
    commands::dispatch(&cli.command, &cfg, &cli.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `irlm --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
