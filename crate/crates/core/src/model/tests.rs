use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{central_difference, max_relative_error, STEP};

fn tiny_config(wiring: Wiring) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        grid_height: 2,
        grid_width: 2,
        hidden_dim: 6,
        attention_dim: 6,
        embed_dim: 6,
        vocab_size: 11,
        wiring,
        ..ModelConfig::published()
    }
}

fn random_features(rng: &mut ChaCha8Rng, d: usize, n: usize) -> VisualFeatures {
    let data = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    VisualFeatures::from_matrix(Tensor::matrix(d, n, data).unwrap()).unwrap()
}

fn zero_all(params: &mut ModelParams) {
    for (_, t) in params.iter_mut() {
        t.data_mut().fill(0.0);
    }
}

fn set(params: &mut ModelParams, name: &str, values: &[f64]) {
    params.get_mut(name).unwrap().data_mut().copy_from_slice(values);
}

/// Two-dimensional case with every intermediate fixed by hand. The GRUs
/// have zero weights, so from zero state `h' = σ(0)·tanh(b_h) = 0.5 tanh(b_h)`.
fn hand_model() -> (AcLite, ModelParams, VisualFeatures) {
    let config = ModelConfig {
        feature_dim: 2,
        grid_height: 1,
        grid_width: 2,
        hidden_dim: 2,
        attention_dim: 2,
        embed_dim: 2,
        vocab_size: 3,
        wiring: Wiring::Literal,
        gru_bias: true,
        output_bias: true,
        attention_bias: false,
    };
    let model = AcLite::new(config).unwrap();
    let mut p = model.init_params(1);
    zero_all(&mut p);
    let bh = [0.6f64.atanh(), (-0.4f64).atanh()];
    set(&mut p, "gru_att.b_h", &bh);
    set(&mut p, "gru_lang.b_h", &bh);
    set(&mut p, "att.hidden.weight", &[1.0, 2.0, 0.0, -1.0]);
    set(&mut p, "att.feature.weight", &[1.0, 0.0, 1.0, 1.0]);
    set(&mut p, OMEGA, &[2.0, 1.0]);
    set(&mut p, "output.weight", &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    set(&mut p, "output.bias", &[0.0, 0.0, 0.5]);
    // a_1 = [1, 2], a_2 = [3, -1]
    let feats = VisualFeatures::from_matrix(Tensor::matrix(2, 2, vec![1.0, 3.0, 2.0, -1.0]).unwrap()).unwrap();
    (model, p, feats)
}

#[test]
fn hand_sized_attention() {
    let (model, p, feats) = hand_model();
    let prepared = model.prepare(&p, &feats).unwrap();
    let out = model.infer_step(&p, &prepared, &model.initial_state()).unwrap();
    // h^A = [0.3, -0.2]; q = W_e^h h = [-0.1, 0.2]
    // W_e^a a_1 = [1, 3], W_e^a a_2 = [3, 2]
    // β_1 = 2(-0.1·1) + 1(0.2·3) = 0.4, β_2 = 2(-0.1·3) + 1(0.2·2) = -0.2
    assert!((out.new_state.h_att[0] - 0.3).abs() < 1e-12);
    assert!((out.new_state.h_att[1] + 0.2).abs() < 1e-12);
    assert!((out.attention.beta[0] - 0.4).abs() < 1e-12);
    assert!((out.attention.beta[1] + 0.2).abs() < 1e-12);
    let a1 = 1.0 / (1.0 + (-0.6f64).exp());
    assert!((out.attention.alpha[0] - a1).abs() < 1e-12);
    assert!((out.attention.alpha[0] - 0.645_656_306_3).abs() < 1e-9);
    let expected = [a1 * 1.0 + (1.0 - a1) * 3.0, a1 * 2.0 - (1.0 - a1)];
    assert!((out.attention.attended[0] - expected[0]).abs() < 1e-12);
    assert!((out.attention.attended[1] - expected[1]).abs() < 1e-12);
    assert!((out.attention.attended[0] - 1.708_687_388).abs() < 1e-9);
}

#[test]
fn hand_sized_decode() {
    // h^G = [0.3, -0.2] regardless of â; logits = [0.3, -0.2, 0.6].
    let (model, p, feats) = hand_model();
    let prepared = model.prepare(&p, &feats).unwrap();
    let out = model.infer_step(&p, &prepared, &model.initial_state()).unwrap();
    let logits = [0.3f64, -0.2, 0.6];
    for (a, b) in out.logits.iter().zip(logits) {
        assert!((a - b).abs() < 1e-12);
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (p, l) in out.probs.iter().zip(logits) {
        assert!((p - l.exp() / z).abs() < 1e-12);
    }
    assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_omega_gives_uniform_attention() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let mut p = model.init_params(3);
    set(&mut p, OMEGA, &[0.0; 6]);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(4), 8, 4);
    let prepared = model.prepare(&p, &feats).unwrap();
    let out = model.infer_step(&p, &prepared, &model.initial_state()).unwrap();
    for a in &out.attention.alpha {
        assert!((a - 0.25).abs() < 1e-15);
    }
    let mean = feats.mean_pooled().data();
    for (x, m) in out.attention.attended.iter().zip(mean) {
        assert!((x - m).abs() < 1e-12);
    }
}

#[test]
fn identical_columns_attend_to_that_column() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = model.init_params(5);
    let c: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
    let data: Vec<f64> = c.iter().flat_map(|&v| [v; 4]).collect();
    let feats = VisualFeatures::from_matrix(Tensor::matrix(8, 4, data).unwrap()).unwrap();
    let prepared = model.prepare(&p, &feats).unwrap();
    let out = model.infer_step(&p, &prepared, &model.initial_state()).unwrap();
    for (x, want) in out.attention.attended.iter().zip(&c) {
        assert!((x - want).abs() < 1e-12);
    }
}

#[test]
fn zero_output_weights_give_uniform_words() {
    let mut cfg = tiny_config(Wiring::ButdStyle);
    cfg.output_bias = false;
    let model = AcLite::new(cfg).unwrap();
    let mut p = model.init_params(6);
    set(&mut p, "output.weight", &[0.0; 66]);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(1), 8, 4);
    let prepared = model.prepare(&p, &feats).unwrap();
    let out = model.infer_step(&p, &prepared, &model.initial_state()).unwrap();
    for q in &out.probs {
        assert!((q - 1.0 / 11.0).abs() < 1e-15);
    }
}

#[test]
fn attention_invariants_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..50 {
        let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
        let p = model.init_params(seed);
        let feats = random_features(&mut rng, 8, 4);
        let prepared = model.prepare(&p, &feats).unwrap();
        let mut state = model.initial_state();
        state.prev_token = rng.gen_range(0..11);
        let out = model.infer_step(&p, &prepared, &state).unwrap();
        let alpha = &out.attention.alpha;
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for c in 0..8 {
            let col: Vec<f64> = (0..4).map(|i| feats.regions().at2(c, i)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let x = out.attention.attended[c];
            assert!(lo - 1e-12 <= x && x <= hi + 1e-12);
            let direct: f64 = (0..4).map(|i| alpha[i] * col[i]).sum();
            assert!((x - direct).abs() < 1e-9);
        }
    }
}

#[test]
fn scaling_omega_keeps_attention_argmax() {
    let model = AcLite::new(tiny_config(Wiring::Literal)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = random_features(&mut rng, 8, 4);
    let base = model.init_params(9);
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let run = |lambda: f64| {
        let mut p = base.clone();
        for w in p.get_mut(OMEGA).unwrap().data_mut() {
            *w *= lambda;
        }
        let prepared = model.prepare(&p, &feats).unwrap();
        model
            .infer_step(&p, &prepared, &model.initial_state())
            .unwrap()
            .attention
            .alpha
    };
    let a1 = run(1.0);
    for lambda in [0.5, 2.0, 10.0] {
        let a = run(lambda);
        assert_eq!(argmax(&a), argmax(&a1));
    }
    let sharp = run(10.0);
    assert!(sharp[argmax(&sharp)] >= a1[argmax(&a1)]);
}

#[test]
fn wiring_mode_and_word_input_must_agree() {
    let model = AcLite::new(tiny_config(Wiring::Literal)).unwrap();
    let p = model.init_params(0);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(0), 8, 4);
    let mut tape = Tape::with_params(&p);
    let fv = model.feature_vars(&mut tape, &feats).unwrap();
    let state = model.zero_state(&mut tape).unwrap();
    let word = tape.constant(vec![6], vec![0.0; 6]).unwrap();
    let err = model.attention_step(&mut tape, &fv, &state, Some(word)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let butd = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = butd.init_params(0);
    let mut tape = Tape::with_params(&p);
    let fv = butd.feature_vars(&mut tape, &feats).unwrap();
    let state = butd.zero_state(&mut tape).unwrap();
    assert!(matches!(
        butd.attention_step(&mut tape, &fv, &state, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn mismatched_features_are_dimension_errors() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = model.init_params(0);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(0), 8, 5);
    assert!(matches!(model.prepare(&p, &feats), Err(Error::Dimension(_))));
}

#[test]
fn single_step_loss_is_negative_log_eos() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = model.init_params(8);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(8), 8, 4);
    let (loss, probs, alphas) = model.teacher_forced_loss(&p, &feats, &[BOS, EOS]).unwrap();
    assert_eq!(probs.len(), 1);
    assert_eq!(alphas.len(), 1);
    assert!((loss + probs[0][EOS].ln()).abs() < 1e-12);
}

#[test]
fn forcing_gold_probability_gives_zero_loss() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let mut p = model.init_params(8);
    set(&mut p, "output.weight", &[0.0; 66]);
    let mut bias = vec![0.0; 11];
    bias[EOS] = 1000.0;
    set(&mut p, "output.bias", &bias);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(8), 8, 4);
    let (loss, _, _) = model.teacher_forced_loss(&p, &feats, &[BOS, EOS]).unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
}

#[test]
fn loss_matches_manual_step_loop() {
    for wiring in [Wiring::Literal, Wiring::ButdStyle] {
        let model = AcLite::new(tiny_config(wiring)).unwrap();
        let p = model.init_params(21);
        let feats = random_features(&mut ChaCha8Rng::seed_from_u64(21), 8, 4);
        let tokens = [BOS, 5, 7, 4, 9, EOS];
        let (loss, _, _) = model.teacher_forced_loss(&p, &feats, &tokens).unwrap();

        let prepared = model.prepare(&p, &feats).unwrap();
        let mut state = model.initial_state();
        let mut nll = 0.0;
        for w in tokens.windows(2) {
            state.prev_token = w[0];
            let out = model.infer_step(&p, &prepared, &state).unwrap();
            nll -= out.probs[w[1]].ln();
            state = out.new_state;
        }
        let manual = nll / (tokens.len() - 1) as f64;
        assert!((loss - manual).abs() < 1e-12, "{wiring:?}: {loss} vs {manual}");
    }
}

#[test]
fn sequence_log_prob_sums_picked_terms() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = model.init_params(2);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(2), 8, 4);
    let tokens = [BOS, 4, 6, EOS];
    let (loss, _, _) = model.teacher_forced_loss(&p, &feats, &tokens).unwrap();
    let mut tape = Tape::with_params(&p);
    let fv = model.feature_vars(&mut tape, &feats).unwrap();
    let lp = model.sequence_log_prob(&mut tape, &fv, &tokens).unwrap();
    assert!((tape.scalar(lp) + 3.0 * loss).abs() < 1e-12);
}

#[test]
fn literal_wiring_ignores_history() {
    let model = AcLite::new(tiny_config(Wiring::Literal)).unwrap();
    let p = model.init_params(4);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(4), 8, 4);
    let prepared = model.prepare(&p, &feats).unwrap();
    let run = |history: &[usize]| {
        let mut state = model.initial_state();
        let mut outs = Vec::new();
        for &tok in history {
            state.prev_token = tok;
            let o = model.infer_step(&p, &prepared, &state).unwrap();
            state = o.new_state.clone();
            outs.push(o.probs);
        }
        outs
    };
    assert_eq!(run(&[BOS, 4, 5, 6]), run(&[BOS, 9, 3, 10]));

    let butd = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = butd.init_params(4);
    let prepared = butd.prepare(&p, &feats).unwrap();
    let mut s = butd.initial_state();
    s.prev_token = 4;
    let a = butd.infer_step(&p, &prepared, &s).unwrap().probs;
    s.prev_token = 9;
    let b = butd.infer_step(&p, &prepared, &s).unwrap().probs;
    assert_ne!(a, b);
}

#[test]
fn teacher_forced_rejects_bad_captions() {
    let model = AcLite::new(tiny_config(Wiring::ButdStyle)).unwrap();
    let p = model.init_params(0);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(0), 8, 4);
    assert!(matches!(
        model.teacher_forced_loss(&p, &feats, &[BOS, 11, EOS]),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(
        model.teacher_forced_loss(&p, &feats, &[4, EOS]),
        Err(Error::Data(_))
    ));
}

/// Every parameter entry of the full teacher-forced loss against central
/// differences.
fn check_loss_gradients(wiring: Wiring, seed: u64, tokens: &[usize]) {
    let model = AcLite::new(tiny_config(wiring)).unwrap();
    let params = model.init_params(seed);
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(seed + 100), 8, 4);
    let mut tape = Tape::with_params(&params);
    let fv = model.feature_vars(&mut tape, &feats).unwrap();
    let tf = model.forward_teacher_forced(&mut tape, &fv, tokens).unwrap();
    tape.backward(tf.loss).unwrap();
    let grads = tape.param_grads().unwrap();
    for (name, t) in params.iter() {
        let numeric = central_difference(
            |x| {
                let mut q = params.clone();
                q.get_mut(name)?.data_mut().copy_from_slice(x);
                Ok(model.teacher_forced_loss(&q, &feats, tokens)?.0)
            },
            t.data(),
            STEP,
        )
        .unwrap();
        let err = max_relative_error(&grads[name], &numeric);
        assert!(err <= 1e-4, "{wiring:?} {name}: relative error {err}");
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    check_loss_gradients(Wiring::ButdStyle, 31, &[BOS, 5, 8, EOS]);
    check_loss_gradients(Wiring::Literal, 32, &[BOS, 4, EOS]);
}

#[test]
fn config_json_rejects_unknown_keys() {
    let json = serde_json::to_string(&ModelConfig::desk()).unwrap();
    let back: ModelConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, ModelConfig::desk());
    assert!(serde_json::from_str::<ModelConfig>(r#"{"hidden":3}"#).is_err());
    let w: ModelConfig = serde_json::from_str(r#"{"wiring":"literal"}"#).unwrap();
    assert_eq!(w.wiring, Wiring::Literal);
}
