use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Model, Provenance};
use crate::seed::{derive_rng, Purpose};
use crate::tensor::{AdamConfig, AdamState, Param, Scalar, Tape, Tensor, Var};
use crate::text::{encode, Batch, TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub text: String,
}

impl Example {
    /// Reads a `label<TAB>text` file with integer labels.
    pub fn read_tsv(path: &Path) -> Result<Vec<Example>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |detail: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                detail: detail.to_string(),
            };
            let (label, body) = line.split_once('\t').ok_or_else(|| parse_err("expected label<TAB>text"))?;
            let label = label.trim().parse().map_err(|_| parse_err("label must be a class number"))?;
            out.push(Example {
                label,
                text: body.to_string(),
            });
        }
        Ok(out)
    }

    pub fn write_tsv(path: &Path, examples: &[Example]) -> Result<()> {
        let body: String = examples.iter().map(|e| format!("{}\t{}\n", e.label, e.text)).collect();
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// A labelled dataset with disjoint train, validation and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTask {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeTask {
    /// Checks that the splits partition the examples and that every class
    /// occurs in every split.
    pub fn with_splits(
        examples: Vec<Example>,
        train: Vec<usize>,
        validation: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
        if num_classes < 2 {
            return Err(Error::domain("probe task", "need at least two classes"));
        }
        let mut seen = vec![false; examples.len()];
        for &i in train.iter().chain(&validation).chain(&test) {
            if i >= examples.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::domain("probe task", format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::domain("probe task", "splits do not cover every example"));
        }
        for (name, split) in [("train", &train), ("validation", &validation), ("test", &test)] {
            let mut present = vec![false; num_classes];
            split.iter().for_each(|&i| present[examples[i].label] = true);
            if let Some(c) = present.iter().position(|p| !p) {
                return Err(Error::domain("probe task", format!("class {c} missing from {name} split")));
            }
        }
        Ok(ProbeTask {
            examples,
            num_classes,
            train,
            validation,
            test,
        })
    }

    /// Splits each class separately so every split keeps every class.
    pub fn stratified(examples: Vec<Example>, validation_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let mut rng = derive_rng(seed, Purpose::Probe, u64::MAX, 0);
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..num_classes {
            let mut members: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == c).collect();
            if members.len() < 3 {
                return Err(Error::domain(
                    "probe task",
                    format!("class {c} has {} examples; every split needs one", members.len()),
                ));
            }
            members.shuffle(&mut rng);
            let n = members.len() as f64;
            let n_val = ((n * validation_fraction).round() as usize).max(1);
            let n_test = ((n * test_fraction).round() as usize).max(1);
            let n_train = members.len().saturating_sub(n_val + n_test).max(1);
            train.extend_from_slice(&members[..n_train]);
            validation.extend_from_slice(&members[n_train..(n_train + n_val).min(members.len())]);
            test.extend_from_slice(&members[(n_train + n_val).min(members.len())..]);
        }
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Self::with_splits(examples, train, validation, test)
    }

    pub fn split(&self, indices: &[usize]) -> Vec<Example> {
        indices.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn test_examples(&self) -> Vec<Example> {
        self.split(&self.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Only the classifier is trained.
    Frozen,
    FineTune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::Frozen,
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// A linear classifier over `[CLS]` hidden states.
#[derive(Clone, Debug)]
pub struct LinearHead<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn zeros(d_model: usize, num_classes: usize) -> Self {
        LinearHead {
            weight: Tensor::zeros(&[d_model, num_classes]),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    /// Zero weights and log-prior biases: always predicts the most
    /// frequent class of `labels`.
    pub fn majority(d_model: usize, num_classes: usize, labels: &[usize]) -> Self {
        let mut counts = vec![0.0; num_classes];
        labels.iter().for_each(|&l| counts[l] += 1.0);
        let n = labels.len().max(1) as f64;
        let bias: Vec<T> = counts.iter().map(|&c| T::lit(if c > 0.0 { (c / n).ln() } else { -1e9 })).collect();
        LinearHead {
            weight: Tensor::zeros(&[d_model, num_classes]),
            bias: Tensor::from_vec(&[num_classes], bias).expect("bias shape"),
        }
    }

    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let logits = tape
            .constant(features)
            .matmul(tape.constant(&self.weight))?
            .add_bias(tape.constant(&self.bias))?
            .value();
        let c = self.bias.numel();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// `[CLS]` hidden states of `examples`, `[n, d_model]`, without dropout.
pub fn features<T: Scalar>(model: &Model<T>, vocab: &Vocab, examples: &[Example]) -> Result<Tensor<T>> {
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(examples.len() * d);
    for chunk in examples.chunks(64) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|e| encode(&e.text, vocab, model.config.max_len)).collect();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let h = model.forward(&bound, &Batch::from_sequences(&seqs), Provenance::Original, None)?;
        out.extend_from_slice(model.cls_states(&h)?.value().data());
    }
    Tensor::from_vec(&[examples.len(), d], out)
}

/// A trained classifier together with the encoder it reads from.
#[derive(Clone, Debug)]
pub struct Probe<T: Scalar> {
    pub encoder: Model<T>,
    pub head: LinearHead<T>,
    /// One-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub validation_accuracy: f64,
}

impl<T: Scalar> Probe<T> {
    pub fn predict(&self, vocab: &Vocab, examples: &[Example]) -> Result<Vec<usize>> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        self.head.predict(&features(&self.encoder, vocab, examples)?)
    }

    pub fn accuracy(&self, vocab: &Vocab, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::domain("probe", "no examples to score"));
        }
        let predicted = self.predict(vocab, examples)?;
        let correct = predicted.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Accuracy on `test` of always predicting the most frequent `train`
/// label; ties go to the lowest class.
pub fn majority_accuracy(train: &[usize], test: &[usize]) -> f64 {
    let classes = train.iter().chain(test).max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    train.iter().for_each(|&l| counts[l] += 1);
    let majority = (0..classes).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
    test.iter().filter(|&&l| l == majority).count() as f64 / test.len().max(1) as f64
}

/// Trains a linear classifier on `[CLS]` states and keeps the epoch with
/// the best validation accuracy (earliest on ties).
pub fn fit_probe<T: Scalar>(model: &Model<T>, vocab: &Vocab, task: &ProbeTask, config: &ProbeConfig) -> Result<Probe<T>> {
    let train = task.split(&task.train);
    let validation = task.split(&task.validation);
    let mut present = vec![false; task.num_classes];
    train.iter().for_each(|e| present[e.label] = true);
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::domain("probe", format!("class {c} missing from train split")));
    }
    let d = model.config.d_model;
    let mut encoder = model.clone();
    let init = LinearHead::<T>::zeros(d, task.num_classes);
    let mut head = vec![Param::new("probe.weight", init.weight), Param::new("probe.bias", init.bias)];
    let adam = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut head_opt = AdamState::new(adam);
    let mut enc_opt = AdamState::new(adam);
    let frozen_features = match config.mode {
        ProbeMode::Frozen => Some(features(&encoder, vocab, &train)?),
        ProbeMode::FineTune => None,
    };
    let encoded: Vec<TokenSequence> = train.iter().map(|e| encode(&e.text, vocab, model.config.max_len)).collect();

    let mut best: Option<Probe<T>> = None;
    for epoch in 1..=config.epochs.max(1) {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, Purpose::Probe, epoch as u64, 0));
        for chunk in order.chunks(config.batch_size.max(1)) {
            let tape = Tape::new();
            let w = tape.leaf(&head[0].tensor);
            let b = tape.leaf(&head[1].tensor);
            let (feats, bound): (Var<'_, T>, _) = match &frozen_features {
                Some(f) => {
                    let rows: Vec<T> = chunk.iter().flat_map(|&i| f.data()[i * d..(i + 1) * d].to_vec()).collect();
                    (tape.constant(&Tensor::from_vec(&[chunk.len(), d], rows)?), None)
                }
                None => {
                    let bound = encoder.bind(&tape);
                    let batch = Batch::from_sequences(chunk.iter().map(|&i| &encoded[i]));
                    let h = encoder.forward(&bound, &batch, Provenance::Original, None)?;
                    (encoder.cls_states(&h)?, Some(bound))
                }
            };
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let loss = feats.matmul(w)?.add_bias(b)?.cross_entropy(&targets, &vec![true; chunk.len()])?;
            let grads = tape.backward(loss)?;
            for (p, v) in head.iter_mut().zip([w, b]) {
                p.tensor.zero_grad();
                grads.accumulate_into(v, &mut p.tensor)?;
            }
            head_opt.step(&mut head, config.learning_rate)?;
            if let Some(bound) = bound {
                encoder.zero_grad();
                encoder.accumulate_grads(&grads, &bound)?;
                enc_opt.step(&mut encoder.params, config.learning_rate)?;
            }
        }
        let candidate = Probe {
            encoder: encoder.clone(),
            head: LinearHead {
                weight: head[0].tensor.clone(),
                bias: head[1].tensor.clone(),
            },
            best_epoch: epoch,
            validation_accuracy: 0.0,
        };
        let acc = candidate.accuracy(vocab, &validation)?;
        if best.as_ref().is_none_or(|b| acc > b.validation_accuracy) {
            best = Some(Probe {
                validation_accuracy: acc,
                ..candidate
            });
        }
    }
    Ok(best.expect("at least one epoch"))
}

/// Test accuracy of a probe fitted with [`fit_probe`].
pub fn probe_train_eval<T: Scalar>(model: &Model<T>, vocab: &Vocab, task: &ProbeTask, config: &ProbeConfig) -> Result<f64> {
    fit_probe(model, vocab, task, config)?.accuracy(vocab, &task.test_examples())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(labels: &[usize]) -> Vec<Example> {
        labels
            .iter()
            .map(|&l| Example {
                label: l,
                text: format!("w{l}"),
            })
            .collect()
    }

    #[test]
    fn stratified_split_keeps_every_class_everywhere() {
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let task = ProbeTask::stratified(examples(&labels), 0.2, 0.2, 3).unwrap();
        assert_eq!(task.train.len() + task.validation.len() + task.test.len(), 40);
        assert_eq!(task.num_classes, 3);
    }

    #[test]
    fn splits_must_partition() {
        let ex = examples(&[0, 1, 0, 1, 0, 1]);
        assert!(ProbeTask::with_splits(ex.clone(), vec![0, 1], vec![2, 3], vec![4]).is_err());
        assert!(ProbeTask::with_splits(ex.clone(), vec![0, 1], vec![2, 3], vec![4, 4, 5]).is_err());
        assert!(ProbeTask::with_splits(ex.clone(), vec![0, 2], vec![1, 3], vec![4, 5]).is_err());
        assert!(ProbeTask::with_splits(ex, vec![0, 1], vec![2, 3], vec![4, 5]).is_ok());
    }

    #[test]
    fn majority_head_matches_label_counts() {
        let head = LinearHead::<f64>::majority(4, 3, &[2, 2, 1, 0, 2]);
        let feats = Tensor::from_f64(&[3, 4], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0, -4.0, 0.0, 0.0, 9.0]).unwrap();
        assert_eq!(head.predict(&feats).unwrap(), vec![2, 2, 2]);
        assert_eq!(majority_accuracy(&[2, 2, 1, 0, 2], &[2, 1, 2, 0]), 0.5);
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.tsv");
        let ex = examples(&[1, 0, 1]);
        Example::write_tsv(&path, &ex).unwrap();
        assert_eq!(Example::read_tsv(&path).unwrap(), ex);
        fs::write(&path, "x\tfoo\n").unwrap();
        assert!(Example::read_tsv(&path).is_err());
    }
}
