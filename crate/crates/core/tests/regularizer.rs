use irlm_core::ennoise::{ennoise, EnnoiseConfig, EnnoisedInstance};
use irlm_core::model::{HiddenStates, Model, ModelConfig, Provenance};
use irlm_core::regularizer::{
    distribution_distance, dpp, ecp, fill_back, hidden_to_distribution, position_weights, Distance, RegularizerConfig,
};
use irlm_core::tensor::{Tape, Tensor};
use irlm_core::text::{Batch, TokenSequence, CLS, MASK, NUM_SPECIAL, SEP};
use irlm_core::trainer::regularized_objective;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 40;

fn model() -> Model<f64> {
    Model::init(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: VOCAB,
        max_len: 16,
        dropout_rate: 0.1,
        seed: 2,
    })
    .unwrap()
}

fn instances(n: usize, seed: u64, cfg: &EnnoiseConfig) -> Vec<EnnoisedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let mut ids = vec![CLS];
            ids.extend((0..4 + 2 * k).map(|_| rng.random_range(NUM_SPECIAL..VOCAB)));
            ids.push(SEP);
            ennoise(&TokenSequence::new(ids).unwrap(), cfg, VOCAB, &mut rng).unwrap()
        })
        .collect()
}

fn objective(model: &Model<f64>, inst: &[EnnoisedInstance], reg: &RegularizerConfig) -> (f64, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (loss, b) = regularized_objective(model, &tape, &bound, inst, reg, None).unwrap();
    assert!((loss.item() - b.l_total).abs() < 1e-12);
    let grads = tape.backward(loss).unwrap();
    let g = bound
        .vars
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec))
        .collect();
    (b.l_total, g)
}

fn states<'t>(model: &Model<f64>, tape: &'t Tape<f64>, seqs: &[&[usize]], p: Provenance) -> HiddenStates<'t, f64> {
    let bound = model.bind_frozen(tape);
    model.forward(&bound, &Batch::from_id_slices(seqs, None), p, None).unwrap()
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let m = model();
    let inst = instances(4, 1, &EnnoiseConfig::default());
    let reversed: Vec<_> = inst.iter().rev().cloned().collect();
    let reg = RegularizerConfig::default();
    let (a, _) = objective(&m, &inst, &reg);
    let (b, _) = objective(&m, &reversed, &reg);
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn detaching_changes_gradients_but_not_values() {
    let m = model();
    let inst = instances(3, 4, &EnnoiseConfig::default());
    let attached = RegularizerConfig {
        detach_original: false,
        ..RegularizerConfig::default()
    };
    let (la, ga) = objective(&m, &inst, &attached);
    let (ld, gd) = objective(&m, &inst, &RegularizerConfig::default());
    assert!((la - ld).abs() < 1e-12);
    let diff: f64 = ga.iter().flatten().zip(gd.iter().flatten()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-8);
}

#[test]
fn zero_weights_reduce_to_plain_mlm() {
    let m = model();
    let inst = instances(3, 5, &EnnoiseConfig::default());
    let (l0, g0) = objective(&m, &inst, &RegularizerConfig::baseline());
    for (detach_original, detach_filled) in [(false, false), (true, true), (false, true)] {
        let reg = RegularizerConfig {
            detach_original,
            detach_filled,
            ..RegularizerConfig::baseline()
        };
        let (l, g) = objective(&m, &inst, &reg);
        assert_eq!(l, l0);
        assert_eq!(g, g0);
    }
}

#[test]
fn penalties_vanish_for_identical_inputs() {
    let m = model();
    let tape = Tape::new();
    let seqs: [&[usize]; 2] = [&[CLS, 7, 8, 9, SEP], &[CLS, 10, 11, SEP]];
    let orig = states(&m, &tape, &seqs, Provenance::Original);
    let same_filled = states(&m, &tape, &seqs, Provenance::Filled);
    let same_corrupted = states(&m, &tape, &seqs, Provenance::Corrupted);
    let reg = RegularizerConfig::default();
    assert!(dpp(&same_filled, &orig, &reg, None).unwrap().item().abs() < 1e-12);
    assert!(ecp(&same_corrupted, &orig, &reg, None).unwrap().item().abs() < 1e-12);

    let masked: [&[usize]; 2] = [&[CLS, 7, MASK, 9, SEP], &[CLS, 10, 11, SEP]];
    let corrupted = states(&m, &tape, &masked, Provenance::Corrupted);
    assert!(ecp(&corrupted, &orig, &reg, None).unwrap().item() > 0.0);
}

#[test]
fn provenance_is_checked() {
    let m = model();
    let tape = Tape::new();
    let seqs: [&[usize]; 1] = [&[CLS, 7, 8, SEP]];
    let orig = states(&m, &tape, &seqs, Provenance::Original);
    let filled = states(&m, &tape, &seqs, Provenance::Filled);
    let reg = RegularizerConfig::default();
    assert!(ecp(&filled, &orig, &reg, None).is_err());
    assert!(dpp(&orig, &filled, &reg, None).is_err());
}

#[test]
fn distributions_are_rows_of_a_softmax() {
    let m = model();
    let tape = Tape::new();
    let h = states(&m, &tape, &[&[CLS, 7, 8, 9, SEP]], Provenance::Original);
    let p = hidden_to_distribution(&h).unwrap().value();
    let d = m.config.d_model;
    for row in p.data().chunks(d) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&x| x > 0.0));
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn distance_variants_match_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, d) = (5, 6);
    let a: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let weights = [0.1, 0.3, 0.0, 0.4, 0.2];
    let pa: Vec<Vec<f64>> = a.chunks(d).map(softmax).collect();
    let pb: Vec<Vec<f64>> = b.chunks(d).map(softmax).collect();
    let kl = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
    let mse = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d as f64;
    let oracle = |f: &dyn Fn(&[f64], &[f64]) -> f64, swap: bool| {
        (0..rows)
            .map(|r| weights[r] * if swap { f(&pb[r], &pa[r]) } else { f(&pa[r], &pb[r]) })
            .sum::<f64>()
    };
    let run = |cfg: &RegularizerConfig| {
        let tape = Tape::new();
        let p = tape.constant(&Tensor::from_vec(&[rows, d], a.clone()).unwrap()).softmax(1).unwrap();
        let q = tape.constant(&Tensor::from_vec(&[rows, d], b.clone()).unwrap()).softmax(1).unwrap();
        distribution_distance(p, q, &weights, cfg).unwrap().item()
    };
    let base = RegularizerConfig::default();
    assert!((run(&base) - oracle(&kl, false)).abs() < 1e-12);
    let swapped = RegularizerConfig {
        swap_kl_direction: true,
        ..base.clone()
    };
    assert!((run(&swapped) - oracle(&kl, true)).abs() < 1e-12);
    let squared = RegularizerConfig {
        distance: Distance::Mse,
        ..base
    };
    assert!((run(&squared) - oracle(&mse, false)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn position_weights_average_over_sequences(lengths in prop::collection::vec(1usize..10, 1..6)) {
        let len = *lengths.iter().max().unwrap();
        let w = position_weights(&lengths, len, None);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (b, &l) in lengths.iter().enumerate() {
            let row = &w[b * len..(b + 1) * len];
            prop_assert!((row.iter().sum::<f64>() - 1.0 / lengths.len() as f64).abs() < 1e-12);
            prop_assert!(row[l..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fill_back_only_touches_masked_positions(
        ids in prop::collection::vec(NUM_SPECIAL..VOCAB, 1..30),
        picks in prop::collection::vec((any::<prop::sample::Index>(), NUM_SPECIAL..VOCAB), 0..10),
    ) {
        let mut pairs: Vec<(usize, usize)> = picks.iter().map(|(i, t)| (i.index(ids.len()), *t)).collect();
        pairs.sort();
        pairs.dedup_by_key(|p| p.0);
        let (pos, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let filled = fill_back(&ids, &pos, &preds).unwrap();
        for i in 0..ids.len() {
            match pos.iter().position(|&p| p == i) {
                Some(k) => prop_assert_eq!(filled.ids[i], preds[k]),
                None => prop_assert_eq!(filled.ids[i], ids[i]),
            }
        }
    }
}
