use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::grad_check;

fn tiny(chars: &str, use_wes: bool, use_init: bool, seed: u64) -> SeedModel {
    let vocab = CharVocab::new(chars.chars().collect()).unwrap();
    SeedModel::new(ModelConfig::tiny(vocab).with_flags(use_wes, use_init), seed).unwrap()
}

fn random_input(model: &SeedModel, batch: usize, seed: u64) -> Tensor {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * c.input_h * c.input_w).map(|_| rng.random_range(-1.0..1.0)).collect();
    SeedModel::stack_preprocessed(c, batch, data).unwrap()
}

#[test]
fn default_encoder_geometry() {
    let model = SeedModel::new(ModelConfig::default(), 0).unwrap();
    let x = SeedModel::stack_preprocessed(model.config(), 1, vec![0.1; 32 * 128]).unwrap();
    let enc = model.inference().encode(&x).unwrap();
    assert_eq!(enc.h.shape(), &[1, 16, 128]);
}

#[test]
fn zero_image_gives_zero_conv_features() {
    let model = tiny("ab", false, false, 1);
    let x = SeedModel::stack_preprocessed(model.config(), 2, vec![0.0; 2 * 8 * 16]).unwrap();
    let f = model.conv_features(&x).unwrap();
    assert_eq!(f.shape(), &[2, 3, 4]);
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_is_deterministic_and_checks_shape() {
    let model = tiny("ab", false, false, 2).inference();
    let x = random_input(&model, 2, 3);
    assert_eq!(model.encode(&x).unwrap().h.data(), model.encode(&x).unwrap().h.data());
    let bad = Tensor::zeros(&[1, 1, 8, 12]);
    assert!(matches!(model.encode(&bad), Err(Error::Shape { .. })));
}

#[test]
fn semantic_module_zero_hidden_returns_bias() {
    let mut model = tiny("ab", true, true, 3);
    let (k, kh, d) = (24, 5, 4);
    model.params_mut().set("sem.w1", vec![0.0; k * kh]).unwrap();
    model.params_mut().set("sem.b2", vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let enc = model.encode(&random_input(&model, 1, 4)).unwrap();
    assert_eq!(model.predict_semantics(&enc).unwrap().data(), &[0.5, -1.0, 2.0, 0.25][..d]);
}

#[test]
fn semantic_module_identity_on_nonnegative_input() {
    let vocab = CharVocab::new(vec!['a']).unwrap();
    let mut config = ModelConfig::tiny(vocab);
    let k = config.semantic_input();
    config.semantic_dim = k;
    config.semantic_hidden = k;
    let mut model = SeedModel::new(config, 0).unwrap();
    let eye: Vec<f64> = (0..k * k).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect();
    model.params_mut().set("sem.w1", eye.clone()).unwrap();
    model.params_mut().set("sem.w2", eye).unwrap();
    let input: Vec<f64> = (0..k).map(|i| i as f64 * 0.3).collect();
    let s = model.semantic_module(&Tensor::new(&[1, k], input.clone()).unwrap()).unwrap();
    assert_eq!(s.data(), &input[..]);
}

#[test]
fn semantic_loss_gradient_wrt_w1() {
    let model = tiny("ab", true, true, 5);
    let x = random_input(&model, 1, 6);
    let em = Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
    let w1 = model.params().get("sem.w1").unwrap().clone();
    let f = |w: &Tensor| {
        let mut m = model.clone();
        m.params_mut().substitute("sem.w1", w.clone())?;
        let s = m.predict_semantics(&m.encode(&x)?)?;
        Ok(s.cosine(&em)?.one_minus().sum())
    };
    let report = grad_check(f, &w1, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "max error {}", report.max_error);
}

#[test]
fn uniform_scores_give_mean_context() {
    let h = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let (ctx, alpha) = attend(&h, &Tensor::new(&[1, 3], vec![0.7; 3]).unwrap()).unwrap();
    assert!((ctx.data()[0] - 3.0).abs() < 1e-12 && (ctx.data()[1] - 5.0).abs() < 1e-12);
    assert!(alpha.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn hard_scores_select_one_position() {
    let h = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let scores = Tensor::new(&[1, 3], vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap();
    let (ctx, _) = attend(&h, &scores).unwrap();
    assert_eq!(ctx.data(), &[3.0, 4.0]);
}

#[test]
fn attention_weights_are_a_distribution() {
    for seed in 0..10 {
        let model = tiny("abc", true, true, seed).inference();
        let enc = model.encode(&random_input(&model, 3, seed + 100)).unwrap();
        let s = model.predict_semantics(&enc).unwrap();
        let state = model.init_decoder_state(&s).unwrap();
        let step = model.attention_step(&enc, &state, &[0, 1, model.config().go_symbol()]).unwrap();
        for row in step.alpha.data().chunks(4) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn init_state_follows_flag() {
    let off = tiny("ab", true, false, 7);
    let s = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(off.init_decoder_state(&s).unwrap().data(), &[0.0; 6]);
    let on = tiny("ab", true, true, 7);
    assert_eq!(on.init_decoder_state(&Tensor::zeros(&[1, 4])).unwrap().data(), &[0.0; 6]);
}

#[test]
fn init_state_changes_first_logits() {
    let model = tiny("ab", true, true, 8).inference();
    let enc = model.encode(&random_input(&model, 1, 9)).unwrap();
    let go = [model.config().go_symbol()];
    let logits = |s: Vec<f64>| {
        let st = model.init_decoder_state(&Tensor::new(&[1, 4], s).unwrap()).unwrap();
        model.attention_step(&enc, &st, &go).unwrap().logits.to_vec()
    };
    assert_ne!(logits(vec![0.1, 0.2, 0.3, 0.4]), logits(vec![0.1, 0.2, 0.3, 0.5]));
}

#[test]
fn greedy_stops_on_immediate_eos() {
    let mut model = tiny("ab", false, false, 10);
    let v = model.config().vocab.len();
    let eos = model.config().vocab.eos();
    let bias: Vec<f64> = (0..v).map(|s| if s == eos { 50.0 } else { 0.0 }).collect();
    model.params_mut().set("out.b", bias).unwrap();
    let model = model.inference();
    let enc = model.encode(&random_input(&model, 2, 11)).unwrap();
    let s = model.predict_semantics(&enc).unwrap();
    for d in model.decode_greedy(&enc, &s, 4).unwrap() {
        assert_eq!(d.symbols, vec![eos]);
        assert!(d.finished);
        assert_eq!(model.config().vocab.decode(&d.symbols), "");
    }
}

#[test]
fn beam_width_one_matches_greedy() {
    for seed in 0..20 {
        let model = tiny("abc", seed % 2 == 0, seed % 3 == 0, seed).inference();
        let enc = model.encode(&random_input(&model, 3, seed + 50)).unwrap();
        let s = model.predict_semantics(&enc).unwrap();
        let greedy = model.decode_greedy(&enc, &s, 5).unwrap();
        let beam = model.beam_search(&enc, &s, 1, 5).unwrap();
        for (g, b) in greedy.iter().zip(&beam) {
            assert_eq!(g.symbols, b.symbols);
            assert_eq!(g.score(), b.score);
        }
    }
}

#[test]
fn wide_beam_matches_enumeration() {
    for seed in 0..10 {
        let model = tiny("a", true, true, seed).inference();
        let enc = model.encode(&random_input(&model, 1, seed + 7)).unwrap();
        let s = model.predict_semantics(&enc).unwrap();
        let beam = model.beam_search(&enc, &s, 81, 4).unwrap().remove(0);
        let (best, score) = brute_force_best(&model, &enc, &s, 4).unwrap();
        assert_eq!(beam.symbols, best);
        assert_eq!(beam.score, score);
    }
}

#[test]
fn beam_rejects_zero_width() {
    let model = tiny("a", false, false, 0).inference();
    let enc = model.encode(&random_input(&model, 1, 0)).unwrap();
    let s = model.predict_semantics(&enc).unwrap();
    assert!(model.beam_search(&enc, &s, 0, 4).is_err());
}

#[test]
fn hypothesis_order_breaks_ties() {
    use std::cmp::Ordering::*;
    assert_eq!(hypothesis_order(-1.0, &[1], -2.0, &[0]), Less);
    assert_eq!(hypothesis_order(-1.0, &[1, 2], -1.0, &[5]), Greater);
    assert_eq!(hypothesis_order(-1.0, &[0, 2], -1.0, &[1, 0]), Less);
}

#[test]
fn strategies_agree_when_embedding_equals_prediction() {
    let model = tiny("ab", true, true, 12);
    let x = random_input(&model, 2, 13);
    let targets = vec![vec![0, 1, 2], vec![1, 2, 3]];
    let predicted = model.forward_training(&x, &targets, Strategy::Predicted, None).unwrap();
    let em = predicted.semantics.detach();
    let gt = model.forward_training(&x, &targets, Strategy::GtEmbedding, Some(&em)).unwrap();
    for (a, b) in predicted.logits.iter().zip(&gt.logits) {
        assert_eq!(a.data(), b.data());
    }
    assert!(model.forward_training(&x, &targets, Strategy::GtEmbedding, None).is_err());
}

#[test]
fn baseline_decoder_ignores_semantic_weights() {
    let model = tiny("ab", false, false, 14);
    let x = random_input(&model, 1, 15);
    let targets = vec![vec![0, 1, 2]];
    let a = model.forward_training(&x, &targets, Strategy::Predicted, None).unwrap();
    let mut other = model.clone();
    for name in ["sem.w1", "sem.b1", "sem.w2", "sem.b2"] {
        let n = other.params().get(name).unwrap().numel();
        other.params_mut().set(name, vec![0.37; n]).unwrap();
    }
    let b = other.forward_training(&x, &targets, Strategy::Predicted, None).unwrap();
    for (la, lb) in a.logits.iter().zip(&b.logits) {
        assert_eq!(la.data(), lb.data());
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = tiny("abc", true, false, 16);
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path, Some(model.config())).unwrap();
    assert_eq!(back.config(), model.config());
    assert!(back.config().use_wes && !back.config().use_init);
    for (a, b) in model.params().tensors().iter().zip(back.params().tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn checkpoint_rejects_other_vocab_and_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&tiny("abc", false, false, 0), &path).unwrap();
    let other = tiny("abcd", false, false, 0);
    assert!(matches!(load_checkpoint(&path, Some(other.config())), Err(Error::ConfigMismatch(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Truncated { .. })));
    std::fs::write(&path, b"NOTACKPT1xxxxxxxx").unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Format(_))));
}

#[test]
fn recognize_returns_text_and_semantics() {
    let model = tiny("ab", true, true, 17);
    let img = crate::datagen::render_word("ab", 16, 1).unwrap().image;
    let out = model.recognize(&[img.clone(), img], 3).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0], out[1]);
    assert_eq!(out[0].semantics.len(), 4);
}
