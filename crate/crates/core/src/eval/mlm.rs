use crate::ennoise::{ennoise, EnnoiseConfig};
use crate::error::{Error, Result};
use crate::model::{predict_masked, Model, Provenance};
use crate::seed::{derive_rng, Purpose};
use crate::tensor::{Scalar, Tape};
use crate::text::{Batch, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmMetrics {
    /// Mean cross-entropy over all masked positions.
    pub loss: f64,
    /// Top-1 accuracy over all masked positions.
    pub accuracy: f64,
    pub masked_positions: usize,
}

/// Masks every held-out sequence from a stream fixed by `seed` and the
/// sequence index, then scores the model's predictions without dropout.
pub fn mlm_eval<T: Scalar>(
    model: &Model<T>,
    heldout: &[TokenSequence],
    ennoise_config: &EnnoiseConfig,
    seed: u64,
    batch_size: usize,
) -> Result<MlmMetrics> {
    let mut instances = Vec::with_capacity(heldout.len());
    for (i, seq) in heldout.iter().enumerate() {
        if seq.maskable_positions().is_empty() {
            continue;
        }
        let mut rng = derive_rng(seed, Purpose::Evaluation, 0, i as u64);
        instances.push(ennoise(seq, ennoise_config, model.config.vocab_size, &mut rng)?);
    }
    if instances.is_empty() {
        return Err(Error::domain("mlm_eval", "held-out corpus has no maskable tokens"));
    }
    let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
    for chunk in instances.chunks(batch_size.max(1)) {
        let slices: Vec<&[usize]> = chunk.iter().map(|i| i.corrupted.ids()).collect();
        let batch = Batch::from_id_slices(&slices, None);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let h = model.forward(&bound, &batch, Provenance::Corrupted, None)?;
        let logits = model.mlm_logits(&bound, &h)?;
        let mut targets = vec![0; batch.ids.len()];
        let mut mask = vec![false; batch.ids.len()];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, inst) in chunk.iter().enumerate() {
            for (&pos, &label) in inst.masked_positions.iter().zip(&inst.labels) {
                let r = b * batch.len + pos;
                targets[r] = label;
                mask[r] = true;
                rows.push(r);
                labels.push(label);
            }
        }
        let ce = logits.cross_entropy(&targets, &mask)?.item().as_f64();
        loss_sum += ce * rows.len() as f64;
        let predicted = predict_masked(&logits.value(), &rows);
        correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        count += rows.len();
    }
    Ok(MlmMetrics {
        loss: loss_sum / count as f64,
        accuracy: correct as f64 / count as f64,
        masked_positions: count,
    })
}
