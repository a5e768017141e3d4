//! Instance regularization: the corruption penalty and the prediction penalty.
//!
//! Both terms compare hidden states position by position after a softmax
//! along the hidden dimension. The corruption penalty measures how far the
//! corrupted input's states `H` sit from the original input's states `Ĥ`;
//! the prediction penalty does the same for the states `H̃` of the
//! corrupted sequence with the model's own predictions filled back in.

use crate::error::{Error, Result};
use crate::model::{HiddenStates, Provenance};
use crate::tensor::{Scalar, Var};
use crate::text::MASK;

/// Distance between two hidden-state distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Kl,
    Mse,
}

/// Which positions contribute to the penalties.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionSet {
    /// Every non-padded position, `[CLS]` and `[SEP]` included.
    NonPadded,
    /// Only the corrupted positions.
    MaskedOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub weight_ecp: f64,
    pub weight_dpp: f64,
    /// Treat `Ĥ` as a constant target.
    pub detach_original: bool,
    /// Block gradients through `H̃`.
    pub detach_filled: bool,
    pub eps_kl: f64,
    pub distance: Distance,
    /// Compute `KL(Ĥ ‖ ·)` instead of `KL(· ‖ Ĥ)`.
    pub swap_kl_direction: bool,
    pub positions: PositionSet,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            weight_ecp: 1.0,
            weight_dpp: 1.0,
            detach_original: true,
            detach_filled: false,
            eps_kl: 1e-8,
            distance: Distance::Kl,
            swap_kl_direction: false,
            positions: PositionSet::NonPadded,
        }
    }
}

impl RegularizerConfig {
    /// Both penalties off: plain masked language modelling.
    pub fn baseline() -> Self {
        RegularizerConfig {
            weight_ecp: 0.0,
            weight_dpp: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, w) in [("weight_ecp", self.weight_ecp), ("weight_dpp", self.weight_dpp)] {
            if !(w >= 0.0 && w.is_finite()) {
                problems.push(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        if !(self.eps_kl > 0.0 && self.eps_kl < 1.0) {
            problems.push(format!("eps_kl must be in (0, 1), got {}", self.eps_kl));
        }
        problems
    }
}

/// The corrupted sequence with predictions written at the masked positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilledSequence {
    pub ids: Vec<usize>,
    pub masked_positions: Vec<usize>,
}

pub fn fill_back(corrupted: &[usize], masked_positions: &[usize], predictions: &[usize]) -> Result<FilledSequence> {
    if masked_positions.len() != predictions.len() {
        return Err(Error::shape("fill_back", &[masked_positions.len()], &[predictions.len()]));
    }
    let mut ids = corrupted.to_vec();
    for (&pos, &pred) in masked_positions.iter().zip(predictions) {
        if pos >= ids.len() {
            return Err(Error::domain("fill_back", format!("position {pos} beyond length {}", ids.len())));
        }
        if pred == MASK {
            return Err(Error::domain("fill_back", format!("prediction at {pos} is the mask symbol")));
        }
        ids[pos] = pred;
    }
    Ok(FilledSequence {
        ids,
        masked_positions: masked_positions.to_vec(),
    })
}

/// Softmax of every position's hidden vector.
pub fn hidden_to_distribution<'t, T: Scalar>(h: &HiddenStates<'t, T>) -> Result<Var<'t, T>> {
    h.states.softmax(1)
}

/// Per-row reduction weights: mean over each sequence's selected
/// positions, then mean over the sequences that have any.
pub fn position_weights(lengths: &[usize], len: usize, masked: Option<&[Vec<usize>]>) -> Vec<f64> {
    let mut w = vec![0.0; lengths.len() * len];
    let rows: Vec<Vec<usize>> = match masked {
        None => lengths.iter().map(|&l| (0..l).collect()).collect(),
        Some(m) => m.to_vec(),
    };
    let contributing = rows.iter().filter(|r| !r.is_empty()).count();
    if contributing == 0 {
        return w;
    }
    for (b, r) in rows.iter().enumerate() {
        for &j in r {
            w[b * len + j] = 1.0 / (r.len() as f64 * contributing as f64);
        }
    }
    w
}

fn check_pair<T: Scalar>(
    first: &HiddenStates<'_, T>,
    second: &HiddenStates<'_, T>,
    expect: (Provenance, Provenance),
) -> Result<()> {
    if (first.provenance, second.provenance) != expect {
        return Err(Error::domain(
            "penalty",
            format!(
                "expected ({}, {}) hidden states, got ({}, {})",
                expect.0, expect.1, first.provenance, second.provenance
            ),
        ));
    }
    if first.states.shape() != second.states.shape() || first.lengths != second.lengths {
        return Err(Error::shape("penalty", &first.states.shape(), &second.states.shape()));
    }
    Ok(())
}

/// Weighted distance between the distributions of `first` and `second`.
pub fn distribution_distance<'t, T: Scalar>(
    first: Var<'t, T>,
    second: Var<'t, T>,
    weights: &[f64],
    config: &RegularizerConfig,
) -> Result<Var<'t, T>> {
    let w: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
    let per_position = match config.distance {
        Distance::Kl if config.swap_kl_direction => second.kl_divergence(first, 1, config.eps_kl)?,
        Distance::Kl => first.kl_divergence(second, 1, config.eps_kl)?,
        Distance::Mse => first.sub(second)?.square().mean_last()?,
    };
    per_position.weighted_sum(&w)
}

fn penalty<'t, T: Scalar>(
    first: &HiddenStates<'t, T>,
    original: &HiddenStates<'t, T>,
    detach_first: bool,
    config: &RegularizerConfig,
    masked: Option<&[Vec<usize>]>,
) -> Result<Var<'t, T>> {
    let mut p = hidden_to_distribution(first)?;
    let mut q = hidden_to_distribution(original)?;
    if detach_first {
        p = p.detach();
    }
    if config.detach_original {
        q = q.detach();
    }
    let masked = match config.positions {
        PositionSet::NonPadded => None,
        PositionSet::MaskedOnly => masked,
    };
    let weights = position_weights(&first.lengths, first.len, masked);
    distribution_distance(p, q, &weights, config)
}

/// Corruption penalty between `H` (corrupted input) and `Ĥ` (original input).
pub fn ecp<'t, T: Scalar>(
    h_corrupted: &HiddenStates<'t, T>,
    h_original: &HiddenStates<'t, T>,
    config: &RegularizerConfig,
    masked: Option<&[Vec<usize>]>,
) -> Result<Var<'t, T>> {
    check_pair(h_corrupted, h_original, (Provenance::Corrupted, Provenance::Original))?;
    penalty(h_corrupted, h_original, false, config, masked)
}

/// Prediction penalty between `H̃` (filled input) and `Ĥ` (original input).
pub fn dpp<'t, T: Scalar>(
    h_filled: &HiddenStates<'t, T>,
    h_original: &HiddenStates<'t, T>,
    config: &RegularizerConfig,
    masked: Option<&[Vec<usize>]>,
) -> Result<Var<'t, T>> {
    check_pair(h_filled, h_original, (Provenance::Filled, Provenance::Original))?;
    penalty(h_filled, h_original, config.detach_filled, config, masked)
}

/// Mean squared difference of two distribution matrices over the rows
/// where `attention_mask` is set.
pub fn mse_distance<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, attention_mask: &[bool]) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse_distance", &a.shape(), &b.shape()));
    }
    let per_row = a.sub(b)?.square().mean_last()?;
    if attention_mask.len() != per_row.shape().iter().product::<usize>() {
        return Err(Error::shape("mse_distance", &per_row.shape(), &[attention_mask.len()]));
    }
    let n = attention_mask.iter().filter(|&&m| m).count().max(1) as f64;
    let w: Vec<T> = attention_mask
        .iter()
        .map(|&m| if m { T::lit(1.0 / n) } else { T::zero() })
        .collect();
    per_row.weighted_sum(&w)
}

/// The logged loss terms of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_dae: f64,
    pub l_ecp: f64,
    pub l_dpp: f64,
    pub l_total: f64,
    pub learning_rate: f64,
    pub wall_time: f64,
}

/// `l_dae + weight_ecp·l_ecp + weight_dpp·l_dpp`.
pub fn regularized_loss(l_dae: f64, l_ecp: f64, l_dpp: f64, config: &RegularizerConfig) -> Result<LossBreakdown> {
    for (term, v) in [("l_dae", l_dae), ("l_ecp", l_ecp), ("l_dpp", l_dpp)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term,
                l_dae,
                l_ecp,
                l_dpp,
            });
        }
    }
    let mut l_total = l_dae;
    if config.weight_ecp != 0.0 {
        l_total += config.weight_ecp * l_ecp;
    }
    if config.weight_dpp != 0.0 {
        l_total += config.weight_dpp * l_dpp;
    }
    Ok(LossBreakdown {
        step: 0,
        l_dae,
        l_ecp,
        l_dpp,
        l_total,
        learning_rate: 0.0,
        wall_time: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use crate::text::{CLS, SEP};

    #[test]
    fn fill_back_examples() {
        // [CLS] the [MASK] sat [SEP] with "cat" = 9 predicted at position 2
        let corrupted = [CLS, 7, MASK, 8, SEP];
        let filled = fill_back(&corrupted, &[2], &[9]).unwrap();
        assert_eq!(filled.ids, vec![CLS, 7, 9, 8, SEP]);
        assert_eq!(fill_back(&corrupted, &[], &[]).unwrap().ids, corrupted.to_vec());
        assert!(fill_back(&corrupted, &[2], &[]).is_err());
        assert!(fill_back(&corrupted, &[2], &[MASK]).is_err());
    }

    #[test]
    fn loss_combination() {
        let unit = RegularizerConfig::default();
        assert!((regularized_loss(1.0, 0.2, 0.3, &unit).unwrap().l_total - 1.5).abs() < 1e-15);
        let no_ecp = RegularizerConfig {
            weight_ecp: 0.0,
            ..unit.clone()
        };
        assert_eq!(regularized_loss(1.0, 0.2, 0.3, &no_ecp).unwrap().l_total, 1.0 + 0.3);
        let base = RegularizerConfig::baseline();
        assert_eq!(regularized_loss(1.25, 0.2, 0.3, &base).unwrap().l_total, 1.25);
        match regularized_loss(1.0, f64::NAN, 0.0, &unit) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "l_ecp"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
        let b = tape.leaf(&Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let mask = [true, true];
        assert_eq!(mse_distance(a, b, &mask).unwrap().item(), 1.0);
        assert_eq!(mse_distance(b, a, &mask).unwrap().item(), 1.0);
        assert_eq!(mse_distance(a, a, &mask).unwrap().item(), 0.0);
        // padded rows are ignored
        assert_eq!(mse_distance(a, b, &[true, false]).unwrap().item(), 1.0);
    }

    #[test]
    fn weights_average_per_sequence_then_batch() {
        let w = position_weights(&[2, 4], 4, None);
        assert_eq!(w, vec![0.25, 0.25, 0.0, 0.0, 0.125, 0.125, 0.125, 0.125]);
        let masked = vec![vec![], vec![1, 3]];
        let w = position_weights(&[2, 4], 4, Some(&masked));
        assert_eq!(w, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.5]);
        assert!((position_weights(&[3, 1, 5], 5, None).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
