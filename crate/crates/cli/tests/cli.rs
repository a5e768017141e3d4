use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
model.n_layers = 1
model.d_model = 16
model.d_ff = 32
model.max_len = 24
train.total_steps = 12
train.batch_size = 8
train.checkpoint_interval = 6
synth.pretrain_sentences = 120
synth.heldout_sentences = 30
synth.probe_examples = 60
probe.epochs = 2
";

fn irlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Writes the tiny config, a synthetic corpus and its vocabulary.
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("tiny.cfg"), TINY).unwrap();
        let out = ws.run(&["synth"], "data");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = ws.run(&["build-vocab", "--corpus", &ws.arg("data/pretrain.txt")], "vocab");
        assert!(out.status.success());
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn run(&self, args: &[&str], out: &str) -> Output {
        let mut full = vec!["--config".to_string(), self.arg("tiny.cfg"), "--out".into(), self.arg(out)];
        full.extend(args.iter().map(|s| s.to_string()));
        irlm(&full.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> Output {
        let corpus = self.arg("data/pretrain.txt");
        let vocab = self.arg("vocab/vocab.txt");
        let mut args = vec!["pretrain", "--corpus", &corpus, "--vocab", &vocab];
        args.extend_from_slice(extra);
        self.run(&args, out)
    }
}

fn metrics_without_wall_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn build_vocab_without_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlm(&["--out", dir.path().to_str().unwrap(), "build-vocab"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--corpus"));
}

#[test]
fn build_vocab_reports_size_and_is_reproducible() {
    let ws = Workspace::new();
    let out = ws.run(&["build-vocab", "--corpus", &ws.arg("data/pretrain.txt")], "vocab2");
    assert!(stdout(&out).starts_with("vocab size "));
    assert_eq!(
        fs::read(ws.path("vocab/vocab.txt")).unwrap(),
        fs::read(ws.path("vocab2/vocab.txt")).unwrap()
    );
}

#[test]
fn pretrain_layout_and_determinism() {
    let ws = Workspace::new();
    for run in ["a", "b"] {
        let out = ws.pretrain(run, &["--seed", "7"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for file in ["config.txt", "metrics.csv", "final.ckpt", "checkpoints/step_000006.ckpt", "checkpoints/step_000012.ckpt"] {
        assert!(ws.path("a").join(file).exists(), "missing {file}");
    }
    let a = metrics_without_wall_time(&ws.path("a/metrics.csv"));
    assert_eq!(a.len(), 13);
    assert_eq!(a, metrics_without_wall_time(&ws.path("b/metrics.csv")));
    assert!(fs::read_to_string(ws.path("a/config.txt")).unwrap().contains("seed = 7\n"));
}

#[test]
fn baseline_flag_matches_zero_weights() {
    let ws = Workspace::new();
    assert!(ws.pretrain("flag", &["--baseline"]).status.success());
    assert!(ws
        .pretrain("explicit", &["--set", "reg.weight_ecp=0", "--set", "reg.weight_dpp=0"])
        .status
        .success());
    assert_eq!(
        metrics_without_wall_time(&ws.path("flag/metrics.csv")),
        metrics_without_wall_time(&ws.path("explicit/metrics.csv"))
    );
    assert_eq!(fs::read(ws.path("flag/final.ckpt")).unwrap(), fs::read(ws.path("explicit/final.ckpt")).unwrap());
}

#[test]
fn resume_continues_the_same_run() {
    let ws = Workspace::new();
    assert!(ws.pretrain("full", &[]).status.success());
    let ckpt = ws.arg("full/checkpoints/step_000006.ckpt");
    let out = ws.pretrain("resumed", &["--resume", &ckpt]);
    assert!(out.status.success(), "{}", stderr(&out));
    let full = metrics_without_wall_time(&ws.path("full/metrics.csv"));
    let resumed = metrics_without_wall_time(&ws.path("resumed/metrics.csv"));
    assert_eq!(resumed[1..], full[7..]);
}

#[test]
fn unknown_keys_and_bad_values_are_all_listed() {
    let ws = Workspace::new();
    let out = ws.run(&["--set", "nonsense=1", "--set", "train.batch_size=zero", "synth"], "x");
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("nonsense") && err.contains("train.batch_size"), "{err}");
    assert!(!ws.path("x/config.txt").exists());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let ws = Workspace::new();
    let out = ws.run(
        &[
            "evaluate",
            "--checkpoint",
            "no/such.ckpt",
            "--vocab",
            &ws.arg("vocab/vocab.txt"),
            "--heldout",
            &ws.arg("data/heldout.txt"),
        ],
        "eval",
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no/such.ckpt"));
}

#[test]
fn evaluate_writes_a_report() {
    let ws = Workspace::new();
    assert!(ws.pretrain("run", &[]).status.success());
    let out = ws.run(
        &[
            "evaluate",
            "--checkpoint",
            &ws.arg("run/final.ckpt"),
            "--vocab",
            &ws.arg("vocab/vocab.txt"),
            "--heldout",
            &ws.arg("data/heldout.txt"),
            "--probe",
            &ws.arg("data/probe.tsv"),
        ],
        "eval",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report = fs::read_to_string(ws.path("eval/evaluation.csv")).unwrap();
    assert!(report.starts_with("checkpoint,mlm_loss,mlm_acc,masked_positions,probe_acc\n"));
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn ablate_with_three_seeds_writes_twelve_rows() {
    let ws = Workspace::new();
    let out = ws.run(
        &[
            "--set",
            "ablation.seeds=0,1,2",
            "--set",
            "train.total_steps=3",
            "--set",
            "train.checkpoint_interval=0",
            "ablate",
            "--corpus",
            &ws.arg("data/pretrain.txt"),
            "--heldout",
            &ws.arg("data/heldout.txt"),
            "--vocab",
            &ws.arg("vocab/vocab.txt"),
            "--probe",
            &ws.arg("data/probe.tsv"),
        ],
        "abl",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(ws.path("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,mlm_loss,mlm_acc,probe_acc");
    assert_eq!(lines.len(), 13);
}

#[test]
fn robustness_with_empty_table_has_zero_delta() {
    let ws = Workspace::new();
    assert!(ws.pretrain("run", &[]).status.success());
    fs::write(ws.path("empty.tsv"), "").unwrap();
    let out = ws.run(
        &[
            "robustness",
            "--checkpoint",
            &format!("ir={}", ws.arg("run/final.ckpt")),
            "--vocab",
            &ws.arg("vocab/vocab.txt"),
            "--probe",
            &ws.arg("data/probe.tsv"),
            "--synonyms",
            &ws.arg("empty.tsv"),
        ],
        "rob",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(ws.path("rob/robustness.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "ir");
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[6].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn curves_align_two_runs() {
    let ws = Workspace::new();
    assert!(ws.pretrain("ir", &[]).status.success());
    assert!(ws.pretrain("base", &["--baseline"]).status.success());
    let out = ws.run(
        &[
            "curves",
            "--run",
            &format!("ir={}", ws.arg("ir/metrics.csv")),
            "--run",
            &format!("base={}", ws.arg("base/metrics.csv")),
            "--metrics",
            "l_total,l_dae",
            "--steps",
            "1,6,12",
        ],
        "curves",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(ws.path("curves/curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 2);
    assert!(csv.starts_with("run,step,metric,value\n"));
}
