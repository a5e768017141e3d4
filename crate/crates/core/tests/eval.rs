mod common;

use common::{fixture, tiny_model};
use irlm_core::ennoise::EnnoiseConfig;
use irlm_core::eval::{
    features, fit_probe, is_sound_substitution, majority_accuracy, mlm_eval, robustness_of, Example, LinearHead, Probe,
    ProbeConfig, ProbeTask, SynonymTable,
};
use irlm_core::model::Model;

fn task(examples: Vec<Example>) -> ProbeTask {
    ProbeTask::stratified(examples, 0.2, 0.3, 0).unwrap()
}

#[test]
fn untrained_mlm_loss_is_near_uniform() {
    let fx = fixture(200);
    let model = Model::<f64>::init(tiny_model(fx.vocab.len(), 0)).unwrap();
    let m = mlm_eval(&model, &fx.heldout, &EnnoiseConfig::default(), 1, 32).unwrap();
    let uniform = (fx.vocab.len() as f64).ln();
    assert!((m.loss - uniform).abs() < 0.05 * uniform, "{} vs {uniform}", m.loss);
    assert!((0.0..=1.0).contains(&m.accuracy));
    assert!(m.masked_positions > 0);
}

#[test]
fn mlm_eval_is_deterministic_and_batch_independent() {
    let fx = fixture(200);
    let model = Model::<f64>::init(tiny_model(fx.vocab.len(), 1)).unwrap();
    let cfg = EnnoiseConfig::default();
    let a = mlm_eval(&model, &fx.heldout, &cfg, 3, 32).unwrap();
    assert_eq!(a, mlm_eval(&model, &fx.heldout, &cfg, 3, 32).unwrap());
    let b = mlm_eval(&model, &fx.heldout, &cfg, 3, 7).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-10);
    assert_eq!(a.accuracy, b.accuracy);
    assert_ne!(a, mlm_eval(&model, &fx.heldout, &cfg, 4, 32).unwrap());
}

#[test]
fn mlm_eval_needs_maskable_tokens() {
    let fx = fixture(200);
    let model = Model::<f64>::init(tiny_model(fx.vocab.len(), 1)).unwrap();
    assert!(mlm_eval(&model, &[], &EnnoiseConfig::default(), 0, 8).is_err());
}

#[test]
fn majority_head_scores_the_majority_rate() {
    let fx = fixture(200);
    let model = Model::<f64>::init(tiny_model(fx.vocab.len(), 2)).unwrap();
    let task = task(fx.corpus.probe.clone());
    let train = task.split(&task.train);
    let test = task.test_examples();
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let probe = Probe {
        encoder: model.clone(),
        head: LinearHead::majority(model.config.d_model, task.num_classes, &labels),
        best_epoch: 0,
        validation_accuracy: 0.0,
    };
    // count-based oracle
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let majority = usize::from(ones > labels.len() - ones);
    let expected = test.iter().filter(|e| e.label == majority).count() as f64 / test.len() as f64;
    assert_eq!(probe.accuracy(&fx.vocab, &test).unwrap(), expected);
    let test_labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    assert_eq!(majority_accuracy(&labels, &test_labels), expected);
}

#[test]
fn frozen_probe_on_untrained_encoder_is_near_majority() {
    let fx = fixture(200);
    let model = Model::<f32>::init(tiny_model(fx.vocab.len(), 3)).unwrap();
    let task = task(fx.corpus.probe.clone());
    let test = task.test_examples();
    let train_labels: Vec<usize> = task.split(&task.train).iter().map(|e| e.label).collect();
    let test_labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let acc = fit_probe(&model, &fx.vocab, &task, &ProbeConfig::default())
        .unwrap()
        .accuracy(&fx.vocab, &test)
        .unwrap();
    let majority = majority_accuracy(&train_labels, &test_labels);
    assert!((acc - majority).abs() <= 0.05, "{acc} vs {majority}");
}

#[test]
fn probe_fitting_is_deterministic() {
    let fx = fixture(200);
    let model = Model::<f32>::init(tiny_model(fx.vocab.len(), 4)).unwrap();
    let task = task(fx.corpus.probe[..300].to_vec());
    let cfg = ProbeConfig {
        epochs: 3,
        ..ProbeConfig::default()
    };
    let a = fit_probe(&model, &fx.vocab, &task, &cfg).unwrap();
    let b = fit_probe(&model, &fx.vocab, &task, &cfg).unwrap();
    assert_eq!(a.head.weight.data(), b.head.weight.data());
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn features_are_cls_states_of_each_example() {
    let fx = fixture(200);
    let model = Model::<f64>::init(tiny_model(fx.vocab.len(), 5)).unwrap();
    let ex = &fx.corpus.probe[..5];
    let all = features(&model, &fx.vocab, ex).unwrap();
    let d = model.config.d_model;
    for (i, e) in ex.iter().enumerate() {
        let one = features(&model, &fx.vocab, std::slice::from_ref(e)).unwrap();
        for k in 0..d {
            assert!((one.data()[k] - all.data()[i * d + k]).abs() < 1e-12);
        }
    }
    assert_eq!(all.shape(), &[5, d]);
}

fn fitted(seed: u64) -> (common::Fixture, Probe<f32>, ProbeTask) {
    let fx = fixture(200);
    let model = Model::<f32>::init(tiny_model(fx.vocab.len(), seed)).unwrap();
    let task = task(fx.corpus.probe.clone());
    let cfg = ProbeConfig {
        epochs: 2,
        ..ProbeConfig::default()
    };
    let probe = fit_probe(&model, &fx.vocab, &task, &cfg).unwrap();
    (fx, probe, task)
}

#[test]
fn empty_table_leaves_accuracy_unchanged() {
    let (fx, probe, task) = fitted(6);
    let table = SynonymTable::new(Vec::<(String, Vec<String>)>::new()).unwrap();
    let (report, swapped) = robustness_of(&probe, &fx.vocab, &task.test_examples(), &table, 1.0, 0).unwrap();
    assert_eq!(report.delta, 0.0);
    assert_eq!(report.altered_fraction, 0.0);
    assert_eq!(swapped, task.test_examples());
}

#[test]
fn swaps_are_sound_and_counted() {
    let (fx, probe, task) = fitted(7);
    let test = task.test_examples();
    let table = &fx.corpus.synonyms;
    let (report, swapped) = robustness_of(&probe, &fx.vocab, &test, table, 1.0, 0).unwrap();
    let altered = test.iter().zip(&swapped).filter(|(a, b)| a.text != b.text).count();
    assert_eq!(report.altered_fraction, altered as f64 / test.len() as f64);
    // every probe sentence carries two canonical cues
    assert_eq!(altered, test.len());
    assert_eq!(report.unsound, 0);
    for (a, b) in test.iter().zip(&swapped) {
        assert!(is_sound_substitution(&a.text, &b.text, table));
        assert_eq!(a.label, b.label);
    }
    assert!((report.delta - (report.transformed - report.original)).abs() < 1e-15);
    assert_eq!(report.original, probe.accuracy(&fx.vocab, &test).unwrap());
}

#[test]
fn robustness_ignores_test_order() {
    let (fx, probe, task) = fitted(8);
    let test = task.test_examples();
    let reversed: Vec<Example> = test.iter().rev().cloned().collect();
    let table = &fx.corpus.synonyms;
    let (a, _) = robustness_of(&probe, &fx.vocab, &test, table, 1.0, 0).unwrap();
    let (b, _) = robustness_of(&probe, &fx.vocab, &reversed, table, 1.0, 0).unwrap();
    assert_eq!(a.original, b.original);
    assert_eq!(a.transformed, b.transformed);
}

#[test]
fn robustness_rejects_an_empty_test_set() {
    let (fx, probe, _) = fitted(9);
    assert!(robustness_of(&probe, &fx.vocab, &[], &fx.corpus.synonyms, 1.0, 0).is_err());
}
