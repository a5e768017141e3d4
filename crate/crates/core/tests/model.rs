use irlm_core::checkpoint;
use irlm_core::model::{Model, ModelConfig, Provenance};
use irlm_core::tensor::Tape;
use irlm_core::text::{Batch, TokenSequence, CLS, SEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_ff: 32,
        vocab_size: 50,
        max_len: 12,
        dropout_rate: 0.1,
        seed: 9,
    }
}

fn seq(body: &[usize]) -> TokenSequence {
    let mut ids = vec![CLS];
    ids.extend_from_slice(body);
    ids.push(SEP);
    TokenSequence::new(ids).unwrap()
}

fn hidden(model: &Model<f64>, seqs: &[TokenSequence]) -> Vec<f64> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let h = model.forward(&bound, &Batch::from_sequences(seqs), Provenance::Original, None).unwrap();
    h.states.value().data().to_vec()
}

#[test]
fn padding_does_not_change_unpadded_positions() {
    let model = Model::<f64>::init(config()).unwrap();
    let short = seq(&[7, 8, 9]);
    let long = seq(&[10, 11, 12, 13, 14, 15, 16, 17]);
    let alone = hidden(&model, std::slice::from_ref(&short));
    let batched = hidden(&model, &[short.clone(), long]);
    let d = model.config.d_model;
    for i in 0..short.len() * d {
        assert!((alone[i] - batched[i]).abs() < 1e-12);
    }
}

#[test]
fn batch_rows_are_independent() {
    let model = Model::<f64>::init(config()).unwrap();
    let a = seq(&[7, 8, 9, 10]);
    let b = seq(&[20, 21, 22, 23]);
    let ab = hidden(&model, &[a.clone(), b.clone()]);
    let ba = hidden(&model, &[b, a]);
    let half = ab.len() / 2;
    assert_eq!(ab[..half], ba[half..]);
}

#[test]
fn dropout_needs_an_rng_and_is_seeded() {
    let model = Model::<f64>::init(config()).unwrap();
    let batch = Batch::from_sequences(&[seq(&[7, 8, 9, 10])]);
    let run = |seed: Option<u64>| {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let rng = rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
        model.forward(&bound, &batch, Provenance::Corrupted, rng).unwrap().states.value().data().to_vec()
    };
    assert_eq!(run(None), run(None));
    assert_eq!(run(Some(1)), run(Some(1)));
    assert_ne!(run(Some(1)), run(None));
    assert_ne!(run(Some(1)), run(Some(2)));
}

#[test]
fn forward_rejects_out_of_range_input() {
    let model = Model::<f64>::init(config()).unwrap();
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let too_long = seq(&[7; 11]);
    assert!(model.forward(&bound, &Batch::from_sequences(&[too_long]), Provenance::Original, None).is_err());
    let bad_id = seq(&[70]);
    assert!(model.forward(&bound, &Batch::from_sequences(&[bad_id]), Provenance::Original, None).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f64>::init(config()).unwrap();
    checkpoint::save(&path, &model, None).unwrap();
    let (back, opt) = checkpoint::load::<f64>(&path).unwrap();
    assert!(opt.is_none());
    let s = [seq(&[7, 8, 9])];
    assert_eq!(hidden(&model, &s), hidden(&back, &s));
    assert_eq!(checkpoint::stored_dtype(&path).unwrap(), irlm_core::tensor::DType::F64);
}

#[test]
fn single_precision_checkpoint_loads_as_double() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::init(config()).unwrap();
    checkpoint::save(&path, &model, None).unwrap();
    let (back, _) = checkpoint::load::<f64>(&path).unwrap();
    for (a, b) in model.params.iter().zip(&back.params) {
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| *x as f64 == *y));
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let err = checkpoint::load::<f64>(std::path::Path::new("/nonexistent/x.ckpt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.ckpt"));
}
