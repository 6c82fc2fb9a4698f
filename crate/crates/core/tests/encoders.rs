use mpatch_core::data::shared_tokenizer;
use mpatch_core::encoders::*;
use mpatch_core::rng::Rng;
use mpatch_core::Tensor;
use proptest::prelude::*;

fn images(n: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(vec![n, c, 16, 16], (0..n * c * 256).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn default_image_encoder_has_73312_parameters() {
    // 48*64+64 patch, 16*64 pos, 2 blocks of 33472, 128 final norm, 64*32+32 out.
    let cfg = EncoderConfig::image(0);
    assert_eq!(cfg.parameter_count(), 73312);
    let enc = Encoder::init(cfg.clone()).unwrap();
    let stored: usize = enc.params().tensors().filter(|(n, _)| *n != "logit_scale").map(|(_, t)| t.len()).sum();
    assert_eq!(stored, 73312);
    let shapes: usize = cfg.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(shapes, 73312);
}

#[test]
fn parameter_shapes_sum_to_the_closed_form() {
    for cfg in [EncoderConfig::image(1), EncoderConfig::text(40, 1), EncoderConfig::modality(8, 1)] {
        let shapes: usize = cfg.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(shapes, cfg.parameter_count(), "{}", cfg.architecture_id());
    }
}

#[test]
fn same_seed_same_embeddings() {
    let batch = images(6, 3, 2);
    let a = Encoder::init(EncoderConfig::image(5)).unwrap().encode(&batch).unwrap();
    let b = Encoder::init(EncoderConfig::image(5)).unwrap().encode(&batch).unwrap();
    assert!(a.bit_eq(&b));
    let c = Encoder::init(EncoderConfig::image(6)).unwrap().encode(&batch).unwrap();
    assert!(!a.bit_eq(&c));
}

#[test]
fn identical_inputs_give_identical_rows() {
    let one = images(1, 8, 3);
    let batch = Tensor::new(vec![3, 8, 16, 16], one.data().repeat(3)).unwrap();
    let out = Encoder::init(EncoderConfig::modality(8, 0)).unwrap().encode(&batch).unwrap();
    assert_eq!(out.row(0), out.row(1));
    assert_eq!(out.row(0), out.row(2));
    assert!(out.all_finite());
    assert!(norm(out.row(0)) > 0.0);
}

#[test]
fn batch_composition_does_not_change_a_row() {
    let enc = Encoder::init(EncoderConfig::image(4)).unwrap();
    let batch = images(5, 3, 4);
    let full = enc.encode(&batch).unwrap();
    let single = enc.encode(&batch.select_rows(&[3]).unwrap()).unwrap();
    assert_eq!(full.row(3), single.row(0));
}

#[test]
fn padding_only_text_is_finite() {
    let text = TextEncoder::init(shared_tokenizer(8).unwrap(), 1).unwrap();
    let out = text.encode_texts(&["".to_string(), "a photo of".to_string()]).unwrap();
    assert!(out.all_finite());
    assert!(norm(out.row(0)) > 0.0);
    let ids = text.tokenize(&["".to_string()]).unwrap();
    assert!(ids.data().iter().all(|&i| i as usize == text.tokenizer.pad_id()));
}

#[test]
fn projection_is_required_iff_dims_differ() {
    let student = Encoder::init(EncoderConfig::modality(8, 0)).unwrap();
    let batch = images(2, 8, 5);
    let ds = student.embed_dim();
    assert!(encode_modality(&student, &batch, None, ds).is_ok());
    assert!(encode_modality(&student, &batch, None, 32).is_err());
    let proj = ProjectionHead::for_dims(ds, 32).unwrap().unwrap();
    let out = encode_modality(&student, &batch, Some(&proj), 32).unwrap();
    assert_eq!(out.shape(), &[2, 32]);
    // Identity init copies the leading coordinates and zero-pads.
    let raw = student.encode(&batch).unwrap();
    assert_eq!(&out.row(1)[..ds], raw.row(1));
    assert!(out.row(1)[ds..].iter().all(|&v| v == 0.0));
    assert!(ProjectionHead::for_dims(32, 32).unwrap().is_none());
    let same = ProjectionHead::identity(ds, ds).unwrap();
    assert!(encode_modality(&student, &batch, Some(&same), ds).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let enc = Encoder::init(EncoderConfig::image(9)).unwrap();
    let path = dir.path().join("img.mpc");
    enc.params().save(&path).unwrap();
    let back = Encoder::load(&path).unwrap();
    let batch = images(3, 3, 9);
    assert!(enc.encode(&batch).unwrap().bit_eq(&back.encode(&batch).unwrap()));

    let text = TextEncoder::init(shared_tokenizer(8).unwrap(), 2).unwrap();
    let t2 = TextEncoder::from_checkpoint(text.encoder.params().clone()).unwrap();
    let caps = vec!["a photo of a forest".to_string()];
    assert!(text.encode_texts(&caps).unwrap().bit_eq(&t2.encode_texts(&caps).unwrap()));
    assert!(TextEncoder::from_checkpoint(enc.params().clone()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn outputs_are_finite_for_any_input_range(seed in 0u64..1000, scale in 0.0f32..50.0) {
        let enc = Encoder::init(EncoderConfig::image(seed)).unwrap();
        let base = images(2, 3, seed);
        let x = Tensor::new(base.shape().to_vec(), base.data().iter().map(|v| v * scale).collect()).unwrap();
        let out = enc.encode(&x).unwrap();
        prop_assert!(out.all_finite());
        prop_assert_eq!(out.shape(), &[2, 32]);
    }
}
