//! Built-in finite-difference and oracle checks behind `aclite selftest`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::complexity::{count_params, instantiated_params};
use crate::data::{BOS, EOS};
use crate::decoding::{beam_prepared, greedy_prepared, sequence_score};
use crate::error::Result;
use crate::gradcheck::{central_difference, max_relative_error, STEP};
use crate::metrics::{bleu, cider, BleuOptions, EvalItem};
use crate::model::{AcLite, ModelConfig, Wiring};
use crate::training::{decode_checkpoint, encode_checkpoint};
use crate::vision::{decode_features, encode_features, FeatureMap, VisualFeatures};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// `d_a = 8`, `n_a = 4`, `d_h = d_e = 6`, `|V| = 11`.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        grid_height: 2,
        grid_width: 2,
        hidden_dim: 6,
        attention_dim: 6,
        embed_dim: 6,
        vocab_size: 11,
        wiring: Wiring::ButdStyle,
        ..ModelConfig::published()
    }
}

pub fn random_features<R: Rng>(rng: &mut R, d: usize, n: usize) -> VisualFeatures {
    let data = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    VisualFeatures::from_matrix(Tensor::matrix(d, n, data).expect("positive extents")).expect("finite")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub entries: usize,
    pub max_relative_error: f64,
    pub worst: String,
    /// Per parameter tensor: largest relative error.
    pub per_tensor: BTreeMap<String, f64>,
}

/// Analytic gradient of the teacher-forced loss against central differences
/// for every scalar parameter.
pub fn gradient_check_xe(config: &ModelConfig, seed: u64, tokens: &[usize]) -> Result<GradCheck> {
    let model = AcLite::new(config.clone())?;
    let params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let feats = random_features(&mut rng, config.feature_dim, config.num_regions());
    let mut tape = Tape::with_params(&params);
    let fv = model.feature_vars(&mut tape, &feats)?;
    let tf = model.forward_teacher_forced(&mut tape, &fv, tokens)?;
    tape.backward(tf.loss)?;
    let grads = tape.param_grads()?;
    let mut out = GradCheck {
        entries: 0,
        max_relative_error: 0.0,
        worst: String::new(),
        per_tensor: BTreeMap::new(),
    };
    for (name, t) in params.iter() {
        let numeric = central_difference(
            |x| {
                let mut q = params.clone();
                q.get_mut(name)?.data_mut().copy_from_slice(x);
                Ok(model.teacher_forced_loss(&q, &feats, tokens)?.0)
            },
            t.data(),
            STEP,
        )?;
        let err = max_relative_error(&grads[name], &numeric);
        out.entries += t.numel();
        out.per_tensor.insert(name.to_string(), err);
        if err >= out.max_relative_error {
            out.max_relative_error = err;
            out.worst = name.to_string();
        }
    }
    Ok(out)
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Every sequence of at most `max_len` tokens that ends in EOS or reaches
/// `max_len`, with EOS only in final position.
pub fn enumerate_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut done = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in frontier {
            for tok in 0..vocab {
                let mut s: Vec<usize> = seq.clone();
                s.push(tok);
                if tok == EOS {
                    done.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    done.extend(frontier);
    done
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("gradients", || {
            let g = gradient_check_xe(&tiny_config(), 7, &[BOS, 4, 9, EOS])?;
            Ok((
                g.max_relative_error <= 1e-4,
                format!(
                    "{} entries, max relative error {:.2e} ({})",
                    g.entries, g.max_relative_error, g.worst
                ),
            ))
        }),
        check("attention", || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let cfg = tiny_config();
            let model = AcLite::new(cfg.clone())?;
            let mut worst = 0.0f64;
            for seed in 0..100 {
                let params = model.init_params(seed);
                let feats = random_features(&mut rng, 8, 4);
                let prepared = model.prepare(&params, &feats)?;
                let out = model.infer_step(&params, &prepared, &model.initial_state())?;
                worst = worst.max((out.attention.alpha.iter().sum::<f64>() - 1.0).abs());
            }
            Ok((worst <= 1e-9, format!("max |Σα − 1| = {worst:.1e}")))
        }),
        check("beam", || {
            let mut ok = true;
            for seed in 0..10 {
                let cfg = ModelConfig {
                    vocab_size: 5,
                    ..tiny_config()
                };
                let model = AcLite::new(cfg)?;
                let params = model.init_params(seed);
                let feats = random_features(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4);
                let prepared = model.prepare(&params, &feats)?;
                let mut best: Option<(f64, Vec<usize>)> = None;
                for s in enumerate_sequences(5, 3) {
                    let score = sequence_score(&model, &params, &prepared, &s)?;
                    if best.as_ref().is_none_or(|(b, _)| score > *b) {
                        best = Some((score, s));
                    }
                }
                let beams = beam_prepared(&model, &params, &prepared, 125, 3)?;
                let greedy = greedy_prepared(&model, &params, &prepared, 3)?;
                let one = beam_prepared(&model, &params, &prepared, 1, 3)?;
                ok &= beams[0].tokens == best.expect("nonempty").1 && one[0].tokens == greedy;
            }
            Ok((ok, "10 models, |V| = 5, max_len = 3".into()))
        }),
        check("bleu", || {
            let id = [EvalItem {
                hypothesis: words("a b c d e"),
                references: vec![words("a b c d e")],
            }];
            let clip = [EvalItem {
                hypothesis: words("a a a a"),
                references: vec![words("a b")],
            }];
            let s = bleu(&id, BleuOptions::default())?;
            let c = bleu(&clip, BleuOptions::default())?;
            let ok = s.iter().all(|&x| (x - 100.0).abs() < 1e-9) && (c[0] - 25.0).abs() < 1e-9;
            Ok((ok, format!("identity B4 {:.3}, clipped B1 {:.3}", s[3], c[0])))
        }),
        check("cider", || {
            let single = [EvalItem {
                hypothesis: words("a b c d"),
                references: vec![words("a b c d")],
            }];
            let disjoint = [
                EvalItem {
                    hypothesis: words("a b c d"),
                    references: vec![words("a b c d")],
                },
                EvalItem {
                    hypothesis: words("e f g h"),
                    references: vec![words("e f g h")],
                },
            ];
            let (z, t) = (cider(&single)?, cider(&disjoint)?);
            Ok((z == 0.0 && (t - 10.0).abs() < 1e-9, format!("single {z}, disjoint {t:.9}")))
        }),
        check("params", || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut ok = true;
            for _ in 0..5 {
                let cfg = ModelConfig {
                    feature_dim: rng.gen_range(1..16),
                    hidden_dim: rng.gen_range(1..16),
                    attention_dim: rng.gen_range(1..16),
                    vocab_size: rng.gen_range(4..30),
                    wiring: if rng.gen() { Wiring::Literal } else { Wiring::ButdStyle },
                    ..tiny_config()
                };
                ok &= count_params(&cfg)?.total == instantiated_params(&cfg)?;
            }
            Ok((ok, "5 random configurations".into()))
        }),
        check("formats", || {
            let map = FeatureMap::new(2, 1, 2, vec![0.5, -1.25, 3.0, 0.0])?;
            let back = decode_features(&encode_features(&map))?;
            let mut tensors = BTreeMap::new();
            tensors.insert("w".to_string(), Tensor::vector(vec![0.1, -2.0 / 3.0])?);
            let ck = decode_checkpoint(&encode_checkpoint(&tensors)?)?;
            let ok = back == map && ck["w"].data() == tensors["w"].data();
            Ok((ok, "feature map and checkpoint round trips".into()))
        }),
    ]
}
