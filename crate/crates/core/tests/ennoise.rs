use irlm_core::ennoise::{corruption_rate, ennoise, Corruption, EnnoiseConfig};
use irlm_core::text::{is_special, TokenSequence, CLS, MASK, NUM_SPECIAL, SEP, UNK};
use irlm_core::trainer::DataPlan;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 60;

fn sequence() -> impl Strategy<Value = TokenSequence> {
    prop::collection::vec(prop_oneof![9 => NUM_SPECIAL..VOCAB, 1 => Just(UNK)], 1..50).prop_filter_map(
        "needs a maskable token",
        |body| {
            let mut ids = vec![CLS];
            ids.extend(body);
            ids.push(SEP);
            let seq = TokenSequence::new(ids).ok()?;
            (!seq.maskable_positions().is_empty()).then_some(seq)
        },
    )
}

proptest! {
    #[test]
    fn selection_respects_the_contract(seq in sequence(), seed in any::<u64>()) {
        let cfg = EnnoiseConfig::default();
        let inst = ennoise(&seq, &cfg, VOCAB, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let maskable = seq.maskable_positions().len();
        prop_assert_eq!(inst.masked_positions.len(), ((15 * maskable + 50) / 100).max(1));
        prop_assert!(inst.masked_positions.windows(2).all(|w| w[0] < w[1]));
        for (k, &p) in inst.masked_positions.iter().enumerate() {
            prop_assert!(!is_special(seq.ids()[p]));
            prop_assert_eq!(inst.labels[k], seq.ids()[p]);
            let c = inst.corrupted.ids()[p];
            match inst.kinds[k] {
                Corruption::Mask => prop_assert_eq!(c, MASK),
                Corruption::Random => prop_assert!(!is_special(c) && c < VOCAB),
                Corruption::Keep => prop_assert_eq!(c, seq.ids()[p]),
            }
        }
        for i in 0..seq.len() {
            if !inst.masked_positions.contains(&i) {
                prop_assert_eq!(inst.corrupted.ids()[i], seq.ids()[i]);
            }
        }
        prop_assert_eq!(inst.reconstruct(), seq.ids().to_vec());
        prop_assert!(corruption_rate(&inst) > 0.0 && corruption_rate(&inst) <= 1.0);
    }
}

#[test]
fn same_seed_same_corruption() {
    let seq = TokenSequence::new(vec![CLS, 7, 8, 9, 10, 11, 12, 13, SEP]).unwrap();
    let cfg = EnnoiseConfig::default();
    let a = ennoise(&seq, &cfg, VOCAB, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = ennoise(&seq, &cfg, VOCAB, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn selection_is_uniform_over_maskable_positions() {
    let seq = TokenSequence::new((0..22).map(|i| if i == 0 { CLS } else if i == 21 { SEP } else { 5 + i }).collect()).unwrap();
    let cfg = EnnoiseConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut hits = [0usize; 22];
    let trials = 20_000;
    for _ in 0..trials {
        for p in ennoise(&seq, &cfg, VOCAB, &mut rng).unwrap().masked_positions {
            hits[p] += 1;
        }
    }
    assert_eq!(hits[0] + hits[21], 0);
    // 3 of 20 positions per draw
    let expected = trials as f64 * 3.0 / 20.0;
    for &h in &hits[1..21] {
        assert!((h as f64 - expected).abs() < 0.05 * expected, "{hits:?}");
    }
}

#[test]
fn random_replacements_cover_the_non_special_vocabulary() {
    let seq = TokenSequence::new(vec![CLS, 9, 9, 9, 9, 9, 9, 9, SEP]).unwrap();
    let cfg = EnnoiseConfig {
        p_mask: 0.0,
        p_random: 1.0,
        p_keep: 0.0,
        ..EnnoiseConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = vec![0usize; VOCAB];
    for _ in 0..5000 {
        let inst = ennoise(&seq, &cfg, VOCAB, &mut rng).unwrap();
        inst.masked_positions.iter().for_each(|&p| seen[inst.corrupted.ids()[p]] += 1);
    }
    assert!(seen[..NUM_SPECIAL].iter().all(|&c| c == 0));
    assert!(seen[NUM_SPECIAL..].iter().all(|&c| c > 0));
}

#[test]
fn dynamic_masks_change_between_epochs_static_ones_do_not() {
    let seqs: Vec<TokenSequence> = (0..4)
        .map(|k| TokenSequence::new((0..12).map(|i| if i == 0 { CLS } else if i == 11 { SEP } else { 5 + (i * k) % 50 }).collect()).unwrap())
        .collect();
    let masks = |dynamic: bool| {
        let cfg = EnnoiseConfig { dynamic, ..EnnoiseConfig::default() };
        let mut plan = DataPlan::new(seqs.clone(), 4, 3, cfg, VOCAB).unwrap();
        let epoch = |plan: &mut DataPlan, step| {
            let mut v: Vec<_> = plan.step_indices(step).into_iter().zip(plan.instances(step).unwrap()).collect();
            v.sort_by_key(|(i, _)| *i);
            v.into_iter().map(|(_, inst)| inst.masked_positions).collect::<Vec<_>>()
        };
        (epoch(&mut plan, 0), epoch(&mut plan, 1))
    };
    let (a, b) = masks(true);
    assert_ne!(a, b);
    let (a, b) = masks(false);
    assert_eq!(a, b);
}

#[test]
fn sequences_without_maskable_tokens_are_rejected() {
    let seq = TokenSequence::new(vec![CLS, UNK, SEP]).unwrap();
    assert!(ennoise(&seq, &EnnoiseConfig::default(), VOCAB, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(DataPlan::new(vec![seq], 2, 0, EnnoiseConfig::default(), VOCAB).is_err());
}
