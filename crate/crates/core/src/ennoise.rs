//! Masked-language-model corruption of token sequences.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::text::{TokenSequence, MASK, NUM_SPECIAL};

#[derive(Clone, Debug, PartialEq)]
pub struct EnnoiseConfig {
    pub mask_ratio: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
    /// Re-draw masks every epoch instead of fixing them once per sequence.
    pub dynamic: bool,
}

impl Default for EnnoiseConfig {
    fn default() -> Self {
        EnnoiseConfig {
            mask_ratio: 0.15,
            p_mask: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
            dynamic: true,
        }
    }
}

impl EnnoiseConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            problems.push(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        for (name, p) in [("p_mask", self.p_mask), ("p_random", self.p_random), ("p_keep", self.p_keep)] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        let total = self.p_mask + self.p_random + self.p_keep;
        if (total - 1.0).abs() > 1e-9 {
            problems.push(format!("p_mask + p_random + p_keep must equal 1, got {total}"));
        }
        problems
    }

    /// Number of positions to corrupt out of `maskable`: the ratio rounded
    /// half-up, at least one.
    pub fn masked_count(&self, maskable: usize) -> usize {
        let exact = self.mask_ratio * maskable as f64;
        // the epsilon absorbs representation error such as 0.15 * 30 = 4.4999…
        let rounded = (exact + 0.5 + 1e-9).floor() as usize;
        rounded.clamp(1, maskable.max(1))
    }
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// A corrupted sequence together with what was corrupted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnnoisedInstance {
    pub original: TokenSequence,
    pub corrupted: TokenSequence,
    /// Sorted ascending.
    pub masked_positions: Vec<usize>,
    pub labels: Vec<usize>,
    pub kinds: Vec<Corruption>,
}

impl EnnoisedInstance {
    /// An instance with nothing corrupted.
    pub fn clean(original: TokenSequence) -> Self {
        EnnoisedInstance {
            corrupted: original.clone(),
            original,
            masked_positions: Vec::new(),
            labels: Vec::new(),
            kinds: Vec::new(),
        }
    }

    /// Writes the labels back into the corrupted sequence.
    pub fn reconstruct(&self) -> Vec<usize> {
        let mut ids = self.corrupted.ids().to_vec();
        for (&pos, &label) in self.masked_positions.iter().zip(&self.labels) {
            ids[pos] = label;
        }
        ids
    }
}

/// Selects `masked_count` maskable positions uniformly without replacement
/// and corrupts each one as `[MASK]`, a random non-special token, or itself.
pub fn ennoise<R: Rng + ?Sized>(
    seq: &TokenSequence,
    config: &EnnoiseConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<EnnoisedInstance> {
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::domain("ennoise", "sequence has no maskable positions"));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::domain("ennoise", "vocabulary has no non-special tokens"));
    }
    let m = config.masked_count(maskable.len());
    let mut positions: Vec<usize> = index::sample(rng, maskable.len(), m)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    positions.sort_unstable();

    let mut ids = seq.ids().to_vec();
    let mut labels = Vec::with_capacity(m);
    let mut kinds = Vec::with_capacity(m);
    for &pos in &positions {
        labels.push(ids[pos]);
        let u: f64 = rng.random();
        let kind = if u < config.p_mask {
            ids[pos] = MASK;
            Corruption::Mask
        } else if u < config.p_mask + config.p_random {
            ids[pos] = rng.random_range(NUM_SPECIAL..vocab_size);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        kinds.push(kind);
    }
    Ok(EnnoisedInstance {
        original: seq.clone(),
        corrupted: TokenSequence::from_raw(ids),
        masked_positions: positions,
        labels,
        kinds,
    })
}

/// Fraction of maskable positions that were selected.
pub fn corruption_rate(instance: &EnnoisedInstance) -> f64 {
    let maskable = instance.original.maskable_positions().len();
    if maskable == 0 {
        return 0.0;
    }
    instance.masked_positions.len() as f64 / maskable as f64
}
