//! The pre-training loop: corrupt, denoise, fill back, regularize, update.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::checkpoint;
use crate::ennoise::{ennoise, EnnoiseConfig, EnnoisedInstance};
use crate::error::{Error, Result};
use crate::eval::mlm_eval;
use crate::model::{Bound, HiddenStates, Model, ModelConfig, Provenance};
use crate::regularizer::{self, fill_back, regularized_loss, RegularizerConfig};
use crate::seed::{derive_rng, Purpose};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Scalar, Tape, Var};
use crate::text::{Batch, TokenSequence, NUM_SPECIAL};

pub use crate::regularizer::LossBreakdown;

pub const METRICS_HEADER: &str = "step,l_dae,l_ecp,l_dpp,l_total,lr,wall_time_s";
pub const EVAL_HEADER: &str = "step,mlm_loss,mlm_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            _ => Err(format!("precision must be `single` or `double`, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_interval: usize,
    /// Evaluate on held-out text every this many steps; 0 disables.
    pub eval_interval: usize,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub regularizer: RegularizerConfig,
    pub ennoise: EnnoiseConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
            regularizer: RegularizerConfig::default(),
            ennoise: EnnoiseConfig::default(),
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.total_steps < 1 {
            problems.push("total_steps must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            problems.push(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0) {
            problems.push(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        problems.extend(self.regularizer.validate());
        problems.extend(self.ennoise.validate());
        problems
    }
}

/// Linear warm-up from 0 to the peak, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let total = config.total_steps as f64;
    let warm = config.warmup_fraction * total;
    let s = step.min(config.total_steps) as f64;
    if s < warm {
        config.learning_rate * s / warm
    } else if total > warm {
        config.learning_rate * (total - s) / (total - warm)
    } else {
        config.learning_rate
    }
}

/// Which sequences and masks every step sees.
///
/// Epoch `e` visits the sequences in an order drawn from the data stream
/// for `e`; each sequence is corrupted from its own masking stream, keyed
/// by epoch when masks are dynamic.
#[derive(Clone, Debug)]
pub struct DataPlan {
    sequences: Vec<TokenSequence>,
    batch_size: usize,
    seed: u64,
    ennoise: EnnoiseConfig,
    vocab_size: usize,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl DataPlan {
    /// Sequences without a maskable position are dropped.
    pub fn new(
        sequences: Vec<TokenSequence>,
        batch_size: usize,
        seed: u64,
        ennoise: EnnoiseConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        let sequences: Vec<TokenSequence> = sequences
            .into_iter()
            .filter(|s| !s.maskable_positions().is_empty())
            .collect();
        if sequences.is_empty() {
            return Err(Error::domain("train", "corpus has no sequence with a maskable token"));
        }
        Ok(DataPlan {
            sequences,
            batch_size: batch_size.max(1),
            seed,
            ennoise,
            vocab_size,
            cached_epoch: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sequences.len().div_ceil(self.batch_size)
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.sequences.len()).collect();
            order.shuffle(&mut derive_rng(self.seed, Purpose::DataOrder, epoch as u64, 0));
            self.cached_epoch = Some((epoch, order));
        }
        &self.cached_epoch.as_ref().expect("just cached").1
    }

    /// Corpus indices of the batch used at zero-based step `step`.
    pub fn step_indices(&mut self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        let bs = self.batch_size;
        let order = self.epoch_order(epoch);
        order[k * bs..((k + 1) * bs).min(order.len())].to_vec()
    }

    /// The corrupted instances for zero-based step `step`.
    pub fn instances(&mut self, step: usize) -> Result<Vec<EnnoisedInstance>> {
        let epoch = step / self.batches_per_epoch();
        let mask_epoch = if self.ennoise.dynamic { epoch as u64 } else { 0 };
        self.step_indices(step)
            .into_iter()
            .map(|i| {
                let mut rng = derive_rng(self.seed, Purpose::Masking, mask_epoch, i as u64);
                ennoise(&self.sequences[i], &self.ennoise, self.vocab_size, &mut rng)
            })
            .collect()
    }
}

/// Argmax over non-special tokens at each row; ties go to the lowest id.
pub fn predict_fill_tokens<T: Scalar>(logits: &crate::tensor::Tensor<T>, rows: &[usize]) -> Vec<usize> {
    let v = logits.shape()[1];
    rows.iter()
        .map(|&r| {
            let row = &logits.data()[r * v..(r + 1) * v];
            let mut best = NUM_SPECIAL;
            for i in NUM_SPECIAL + 1..v {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Forward pass on a scratch tape, recorded on `tape` as a constant.
fn constant_forward<'t, T: Scalar>(
    model: &Model<T>,
    tape: &'t Tape<T>,
    batch: &Batch,
    provenance: Provenance,
) -> Result<HiddenStates<'t, T>> {
    let scratch = Tape::new();
    let bound = model.bind_frozen(&scratch);
    let h = model.forward(&bound, batch, provenance, None)?;
    Ok(HiddenStates {
        states: tape.constant(&h.states.value()),
        provenance,
        lengths: h.lengths,
        len: h.len,
    })
}

/// Builds the regularized objective for one batch of instances.
///
/// The corrupted input runs with dropout when `dropout` is given; the
/// original and filled inputs always run without it. `Ĥ` and `H̃` are
/// recorded as constants whenever the gradient policy or a zero weight
/// means no gradient should reach the model through them.
pub fn regularized_objective<'t, T: Scalar>(
    model: &Model<T>,
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    instances: &[EnnoisedInstance],
    config: &RegularizerConfig,
    dropout: Option<&mut dyn RngCore>,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let len = instances.iter().map(|i| i.original.len()).max().unwrap_or(0);
    let originals: Vec<&[usize]> = instances.iter().map(|i| i.original.ids()).collect();
    let corrupted: Vec<&[usize]> = instances.iter().map(|i| i.corrupted.ids()).collect();
    let w_batch = Batch::from_id_slices(&originals, Some(len));
    let c_batch = Batch::from_id_slices(&corrupted, Some(len));

    let h = model.forward(bound, &c_batch, Provenance::Corrupted, dropout)?;
    let logits = model.mlm_logits(bound, &h)?;
    let mut targets = vec![0; instances.len() * len];
    let mut mask = vec![false; instances.len() * len];
    let mut rows = Vec::new();
    for (b, inst) in instances.iter().enumerate() {
        for (&pos, &label) in inst.masked_positions.iter().zip(&inst.labels) {
            targets[b * len + pos] = label;
            mask[b * len + pos] = true;
            rows.push(b * len + pos);
        }
    }
    let l_dae = logits.cross_entropy(&targets, &mask)?;

    let predictions = predict_fill_tokens(&logits.value(), &rows);
    let mut offset = 0;
    let mut filled = Vec::with_capacity(instances.len());
    for inst in instances {
        let m = inst.masked_positions.len();
        filled.push(fill_back(inst.corrupted.ids(), &inst.masked_positions, &predictions[offset..offset + m])?.ids);
        offset += m;
    }
    let filled_slices: Vec<&[usize]> = filled.iter().map(Vec::as_slice).collect();
    let p_batch = Batch::from_id_slices(&filled_slices, Some(len));

    let (w_ecp, w_dpp) = (config.weight_ecp, config.weight_dpp);
    let h_orig = if !config.detach_original && (w_ecp > 0.0 || w_dpp > 0.0) {
        model.forward(bound, &w_batch, Provenance::Original, None)?
    } else {
        constant_forward(model, tape, &w_batch, Provenance::Original)?
    };
    let h_filled = if !config.detach_filled && w_dpp > 0.0 {
        model.forward(bound, &p_batch, Provenance::Filled, None)?
    } else {
        constant_forward(model, tape, &p_batch, Provenance::Filled)?
    };
    let masked: Vec<Vec<usize>> = instances.iter().map(|i| i.masked_positions.clone()).collect();

    let l_ecp = if w_ecp > 0.0 {
        regularizer::ecp(&h, &h_orig, config, Some(&masked))?
    } else {
        let h_const = HiddenStates {
            states: h.states.detach(),
            provenance: h.provenance,
            lengths: h.lengths.clone(),
            len: h.len,
        };
        regularizer::ecp(&h_const, &h_orig, config, Some(&masked))?
    };
    let l_dpp = regularizer::dpp(&h_filled, &h_orig, config, Some(&masked))?;

    let breakdown = regularized_loss(
        l_dae.item().as_f64(),
        l_ecp.item().as_f64(),
        l_dpp.item().as_f64(),
        config,
    )?;
    let mut loss = l_dae;
    if w_ecp > 0.0 {
        loss = loss.add(l_ecp.scale(T::lit(w_ecp)))?;
    }
    if w_dpp > 0.0 {
        loss = loss.add(l_dpp.scale(T::lit(w_dpp)))?;
    }
    Ok((loss, breakdown))
}

/// One optimisation step on `instances`; `step` is the one-based update
/// number that sets the learning rate.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut AdamState<T>,
    instances: &[EnnoisedInstance],
    config: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let mut dropout = derive_rng(config.seed, Purpose::Dropout, step as u64, 0);
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (loss, mut breakdown) =
        regularized_objective(model, &tape, &bound, instances, &config.regularizer, Some(&mut dropout))?;
    let grads = tape.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(&grads, &bound)?;
    clip_grad_norm(&mut model.params, config.grad_clip);
    let lr = lr_at(step, config);
    optimizer.step(&mut model.params, lr)?;
    breakdown.step = step;
    breakdown.learning_rate = lr;
    Ok(breakdown)
}

pub fn format_metrics_row(b: &LossBreakdown) -> String {
    format!(
        "{},{},{},{},{},{},{:.3}",
        b.step, b.l_dae, b.l_ecp, b.l_dpp, b.l_total, b.learning_rate, b.wall_time
    )
}

/// Where a run writes its files.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunLayout { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn eval_metrics(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("step_{step:06}.ckpt"))
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

/// Keeps the header and rows with `step <= keep`; creates the file if absent.
fn prepare_csv(path: &Path, header: &str, keep: usize) -> Result<File> {
    let mut lines = Vec::new();
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if step <= keep {
                lines.push(line);
            }
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    drop(f);
    OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdamState<T>,
    pub config: TrainConfig,
    pub plan: DataPlan,
    pub heldout: Vec<TokenSequence>,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        sequences: Vec<TokenSequence>,
        heldout: Vec<TokenSequence>,
    ) -> Result<Self> {
        let mut problems = config.validate();
        problems.extend(model_config.validate());
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let model = Model::init(model_config)?;
        let plan = DataPlan::new(
            sequences,
            config.batch_size,
            config.seed,
            config.ennoise.clone(),
            model.config.vocab_size,
        )?;
        Ok(Trainer {
            model,
            optimizer: AdamState::new(config.adam),
            config,
            plan,
            heldout,
            step: 0,
        })
    }

    /// Restores model and optimizer; training continues after the saved step.
    pub fn resume(
        path: &Path,
        config: TrainConfig,
        sequences: Vec<TokenSequence>,
        heldout: Vec<TokenSequence>,
    ) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (model, optimizer) = checkpoint::load::<T>(path)?;
        let optimizer = optimizer.ok_or_else(|| {
            Error::Checkpoint(format!("{} has no optimizer state to resume from", path.display()))
        })?;
        let step = optimizer.step_count() as usize;
        if step > config.total_steps {
            return Err(Error::Config(vec![format!(
                "checkpoint is at step {step}, beyond total_steps {}",
                config.total_steps
            )]));
        }
        let plan = DataPlan::new(
            sequences,
            config.batch_size,
            config.seed,
            config.ennoise.clone(),
            model.config.vocab_size,
        )?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            plan,
            heldout,
            step,
        })
    }

    /// Number of completed steps.
    pub fn completed_steps(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        let instances = self.plan.instances(self.step)?;
        let breakdown = train_step(&mut self.model, &mut self.optimizer, &instances, &self.config, self.step + 1)?;
        self.step += 1;
        Ok(breakdown)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.optimizer))
    }

    /// Trains to `total_steps`, or to `stop_at` if earlier, writing metrics
    /// and checkpoints under `layout` when given.
    pub fn run(&mut self, layout: Option<&RunLayout>, stop_at: Option<usize>) -> Result<Vec<LossBreakdown>> {
        let until = stop_at.unwrap_or(self.config.total_steps).min(self.config.total_steps);
        let mut files = None;
        if let Some(l) = layout {
            fs::create_dir_all(l.checkpoint_dir()).map_err(|e| Error::io(l.checkpoint_dir(), e))?;
            let metrics = prepare_csv(&l.metrics(), METRICS_HEADER, self.step)?;
            let eval = if self.config.eval_interval > 0 && !self.heldout.is_empty() {
                Some(prepare_csv(&l.eval_metrics(), EVAL_HEADER, self.step)?)
            } else {
                None
            };
            files = Some((metrics, eval));
        }
        let start = Instant::now();
        let mut rows = Vec::new();
        while self.step < until {
            let mut b = self.step()?;
            b.wall_time = start.elapsed().as_secs_f64();
            log::debug!("{}", format_metrics_row(&b));
            if let (Some(l), Some((metrics, eval))) = (layout, files.as_mut()) {
                writeln!(metrics, "{}", format_metrics_row(&b)).map_err(|e| Error::io(l.metrics(), e))?;
                if let Some(eval) = eval {
                    if self.step.is_multiple_of(self.config.eval_interval) {
                        let m = mlm_eval(&self.model, &self.heldout, &self.config.ennoise, self.config.seed, 32)?;
                        writeln!(eval, "{},{},{}", self.step, m.loss, m.accuracy)
                            .map_err(|e| Error::io(l.eval_metrics(), e))?;
                    }
                }
                if self.config.checkpoint_interval > 0 && self.step.is_multiple_of(self.config.checkpoint_interval) {
                    metrics.flush().map_err(|e| Error::io(l.metrics(), e))?;
                    self.save_checkpoint(&l.checkpoint(self.step))?;
                }
            }
            rows.push(b);
        }
        if let Some(l) = layout {
            if self.step == self.config.total_steps {
                self.save_checkpoint(&l.final_checkpoint())?;
            }
        }
        Ok(rows)
    }
}
