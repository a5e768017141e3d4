//! Pre-norm transformer encoder with a tied masked-language-model head.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttentionGeometry, Param, Scalar, Tape, Tensor, Var};
use crate::text::Batch;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: crate::text::DEFAULT_VOCAB_SIZE,
            max_len: crate::text::DEFAULT_MAX_LEN,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= crate::text::NUM_SPECIAL {
            problems.push(format!("vocab_size ({}) must exceed the special tokens", self.vocab_size));
        }
        if self.max_len < 3 {
            problems.push(format!("max_len ({}) must allow [CLS], one token and [SEP]", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        problems
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_kv(&self) -> String {
        format!(
            "n_layers={}\nn_heads={}\nd_model={}\nd_ff={}\nvocab_size={}\nmax_len={}\ndropout_rate={:?}\nseed={}\n",
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.max_len,
            self.dropout_rate,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> std::result::Result<Self, String> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line {line:?}"))?;
            let int = || v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
            match k {
                "n_layers" => cfg.n_layers = int()?,
                "n_heads" => cfg.n_heads = int()?,
                "d_model" => cfg.d_model = int()?,
                "d_ff" => cfg.d_ff = int()?,
                "vocab_size" => cfg.vocab_size = int()?,
                "max_len" => cfg.max_len = int()?,
                "dropout_rate" => cfg.dropout_rate = v.parse().map_err(|e| format!("{k}: {e}"))?,
                "seed" => cfg.seed = v.parse().map_err(|e| format!("{k}: {e}"))?,
                _ => return Err(format!("unknown key {k:?}")),
            }
        }
        Ok(cfg)
    }
}

/// Which input a set of hidden states was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// The corrupted sequence.
    Corrupted,
    /// The uncorrupted sequence.
    Original,
    /// The corrupted sequence with predictions filled back in.
    Filled,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Corrupted => "corrupted",
            Provenance::Original => "original",
            Provenance::Filled => "filled",
        })
    }
}

/// Last-layer outputs for a padded batch, `[batch·len, d_model]`.
#[derive(Clone, Debug)]
pub struct HiddenStates<'t, T: Scalar> {
    pub states: Var<'t, T>,
    pub provenance: Provenance,
    pub lengths: Vec<usize>,
    pub len: usize,
}

impl<'t, T: Scalar> HiddenStates<'t, T> {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// The `lengths[b] × d_model` rows of sequence `b`.
    pub fn sequence(&self, b: usize) -> Result<Var<'t, T>> {
        self.states.slice_rows(b * self.len, self.lengths[b])
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.lengths.len() * self.len];
        for (b, &l) in self.lengths.iter().enumerate() {
            mask[b * self.len..b * self.len + l].fill(true);
        }
        mask
    }
}

// Parameter layout per layer, in order.
const LAYER_PARAMS: usize = 12;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
}

/// The model's parameters recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    pub vars: Vec<Var<'t, T>>,
}

impl<T: Scalar> Model<T> {
    /// Token and learned position embeddings, `n_layers` pre-norm blocks,
    /// a final layer norm, and an output bias for the tied head. Weights
    /// are drawn from N(0, 0.02²); biases start at zero and gains at one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor<T>| params.push(Param::new(name, t));
        add("tok_emb".into(), Tensor::randn(&[v, d], INIT_STD, &mut rng));
        add("pos_emb".into(), Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng));
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            add(p("ln1.gain"), Tensor::full(&[d], T::one()));
            add(p("ln1.bias"), Tensor::zeros(&[d]));
            add(p("attn.w_qkv"), Tensor::randn(&[d, 3 * d], INIT_STD, &mut rng));
            add(p("attn.b_qkv"), Tensor::zeros(&[3 * d]));
            add(p("attn.w_out"), Tensor::randn(&[d, d], INIT_STD, &mut rng));
            add(p("attn.b_out"), Tensor::zeros(&[d]));
            add(p("ln2.gain"), Tensor::full(&[d], T::one()));
            add(p("ln2.bias"), Tensor::zeros(&[d]));
            add(p("ff.w_in"), Tensor::randn(&[d, f], INIT_STD, &mut rng));
            add(p("ff.b_in"), Tensor::zeros(&[f]));
            add(p("ff.w_out"), Tensor::randn(&[f, d], INIT_STD, &mut rng));
            add(p("ff.b_out"), Tensor::zeros(&[d]));
        }
        add("final_ln.gain".into(), Tensor::full(&[d], T::one()));
        add("final_ln.bias".into(), Tensor::zeros(&[d]));
        add("mlm_bias".into(), Tensor::zeros(&[v]));
        Ok(Model { config, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against a fresh initialisation.
    pub fn from_params(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::init(config)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (param, (name, tensor)) in model.params.iter_mut().zip(tensors) {
            if param.name != name || param.tensor.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    tensor.shape(),
                    param.name,
                    param.tensor.shape()
                )));
            }
            param.tensor = tensor.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Records parameters as constants so no gradient flows to them.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(&p.tensor)).collect(),
        }
    }

    /// Adds the gradients from one backward pass into the parameters.
    pub fn accumulate_grads(&mut self, grads: &crate::tensor::Gradients<T>, bound: &Bound<'_, T>) -> Result<()> {
        for (param, &var) in self.params.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(var, &mut param.tensor)?;
        }
        Ok(())
    }

    /// Runs the encoder over `batch`. Padded keys are excluded from
    /// attention. Dropout is applied only when `dropout` supplies an RNG.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, T>,
        batch: &Batch,
        provenance: Provenance,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<HiddenStates<'t, T>> {
        let cfg = &self.config;
        let (bsz, len) = (batch.batch_size(), batch.len);
        if len > cfg.max_len {
            return Err(Error::domain(
                "forward",
                format!("sequence length {len} exceeds max_len {}", cfg.max_len),
            ));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::domain(
                "forward",
                format!("token id {bad} out of range for vocab_size {}", cfg.vocab_size),
            ));
        }
        let v = &bound.vars;
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
        let mut x = v[0].gather_rows(&batch.ids)?.add(v[1].gather_rows(&positions)?)?;
        x = self.dropout(x, dropout.as_deref_mut())?;

        let d = cfg.d_model;
        let key_pad: Vec<bool> = batch.attention_mask.iter().map(|&m| !m).collect();
        let geometry = AttentionGeometry {
            batch: bsz,
            len,
            heads: cfg.n_heads,
        };
        for l in 0..cfg.n_layers {
            let p = &v[2 + l * LAYER_PARAMS..2 + (l + 1) * LAYER_PARAMS];
            let h = x.layer_norm(p[0], p[1], LN_EPS)?;
            let qkv = h.matmul(p[2])?.add_bias(p[3])?;
            let (q, k, val) = (qkv.slice_cols(0, d)?, qkv.slice_cols(d, d)?, qkv.slice_cols(2 * d, d)?);
            let attn = Var::attention(q, k, val, geometry, &key_pad)?;
            let out = self.dropout(attn.matmul(p[4])?.add_bias(p[5])?, dropout.as_deref_mut())?;
            x = x.add(out)?;

            let h = x.layer_norm(p[6], p[7], LN_EPS)?;
            let ff = h.matmul(p[8])?.add_bias(p[9])?.gelu().matmul(p[10])?.add_bias(p[11])?;
            x = x.add(self.dropout(ff, dropout.as_deref_mut())?)?;
        }
        let last = 2 + cfg.n_layers * LAYER_PARAMS;
        let states = x.layer_norm(v[last], v[last + 1], LN_EPS)?;
        Ok(HiddenStates {
            states,
            provenance,
            lengths: batch.lengths.clone(),
            len,
        })
    }

    fn dropout<'t, R: RngCore + ?Sized>(&self, x: Var<'t, T>, rng: Option<&mut R>) -> Result<Var<'t, T>> {
        let rate = self.config.dropout_rate;
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let shape = x.shape();
        let numel = shape.iter().product();
        let mask = (0..numel)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        x.mul_const(&Tensor::from_vec(&shape, mask)?)
    }

    /// Per-position vocabulary logits through the tied embedding matrix.
    pub fn mlm_logits<'t>(&self, bound: &Bound<'t, T>, hidden: &HiddenStates<'t, T>) -> Result<Var<'t, T>> {
        let bias = *bound.vars.last().expect("mlm_bias");
        hidden.states.matmul_nt(bound.vars[0])?.add_bias(bias)
    }

    /// Hidden state at the `[CLS]` position of every sequence, `[batch, d_model]`.
    pub fn cls_states<'t>(&self, hidden: &HiddenStates<'t, T>) -> Result<Var<'t, T>> {
        let ids: Vec<usize> = (0..hidden.batch_size()).map(|b| b * hidden.len).collect();
        hidden.states.gather_rows(&ids)
    }
}

/// Argmax over each of the given logit rows; ties go to the lowest id.
pub fn predict_masked<T: Scalar>(logits: &Tensor<T>, rows: &[usize]) -> Vec<usize> {
    let v = logits.shape()[1];
    rows.iter()
        .map(|&r| {
            let row = &logits.data()[r * v..(r + 1) * v];
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 64,
            vocab_size: 100,
            max_len: 32,
            dropout_rate: 0.1,
            seed: 3,
        }
    }

    #[test]
    fn parameter_census() {
        // tok 100·16 + pos 32·16
        // per layer: ln 2·16·2, qkv 16·48 + 48, out 16·16 + 16, ff 16·64 + 64 + 64·16 + 16
        // final ln 2·16, output bias 100
        let per_layer = 64 + (768 + 48) + (256 + 16) + (1024 + 64 + 1024 + 16);
        let expected = 1600 + 512 + 2 * per_layer + 32 + 100;
        assert_eq!(expected, 8804);
        assert_eq!(Model::<f64>::init(small()).unwrap().parameter_count(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f64>::init(small()).unwrap();
        let b = Model::<f64>::init(small()).unwrap();
        for (p, q) in a.params.iter().zip(&b.params) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
    }

    #[test]
    fn invalid_config_lists_problems() {
        let cfg = ModelConfig {
            d_model: 15,
            n_heads: 2,
            ..small()
        };
        match Model::<f64>::init(cfg) {
            Err(Error::Config(p)) => assert!(p[0].contains("divisible")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = small();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("bogus=1").is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        let logits = Tensor::<f64>::from_f64(&[2, 4], &[0.0, 2.0, 2.0, 1.0, 9.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(predict_masked(&logits, &[0, 1]), vec![1, 0]);
        assert_eq!(predict_masked(&logits, &[]), Vec::<usize>::new());
    }
}
