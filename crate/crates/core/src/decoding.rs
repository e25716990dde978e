//! Greedy, beam and sampled caption generation.
//!
//! Sequences exclude the leading BOS. A sequence is complete when its last
//! token is EOS or it holds `max_len` tokens.

use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::autodiff::ModelParams;
use crate::data::EOS;
use crate::error::{Error, Result};
use crate::model::{AcLite, DecoderState, PreparedFeatures};
use crate::vision::VisualFeatures;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// `ln ŷ_t[tokens[t]]` for every step.
    pub log_probs: Vec<f64>,
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Index of the largest entry, ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Caption tokens without the terminating EOS.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

pub fn greedy_decode(model: &AcLite, params: &ModelParams, features: &VisualFeatures, max_len: usize) -> Result<Vec<usize>> {
    let prepared = model.prepare(params, features)?;
    greedy_prepared(model, params, &prepared, max_len)
}

pub fn greedy_prepared(model: &AcLite, params: &ModelParams, prepared: &PreparedFeatures, max_len: usize) -> Result<Vec<usize>> {
    check_max_len(max_len)?;
    let mut state = model.initial_state();
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let out = model.infer_step(params, prepared, &state)?;
        let tok = argmax(&out.log_probs);
        tokens.push(tok);
        if tok == EOS {
            break;
        }
        state = out.new_state;
        state.prev_token = tok;
    }
    Ok(tokens)
}

fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search on summed log-probabilities, without length normalization.
/// Finished hypotheses stay in the pool and compete with extensions of the
/// active ones. Returns up to `beam_size` hypotheses, best first.
pub fn beam_decode(
    model: &AcLite,
    params: &ModelParams,
    features: &VisualFeatures,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    let prepared = model.prepare(params, features)?;
    beam_prepared(model, params, &prepared, beam_size, max_len)
}

pub fn beam_prepared(
    model: &AcLite,
    params: &ModelParams,
    prepared: &PreparedFeatures,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    if beam_size < 1 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    check_max_len(max_len)?;
    let mut beams = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state(),
        finished: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut pool = Vec::new();
        for beam in beams {
            if beam.finished {
                pool.push(beam);
                continue;
            }
            let out = model.infer_step(params, prepared, &beam.state)?;
            for (tok, lp) in out.log_probs.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                let mut state = out.new_state.clone();
                state.prev_token = tok;
                pool.push(BeamHypothesis {
                    tokens,
                    log_prob: beam.log_prob + lp,
                    state,
                    finished: tok == EOS,
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(beam_size);
        beams = pool;
    }
    Ok(beams)
}

/// Draws each token from `ŷ_t` and records its log-probability.
pub fn sample_decode<R: Rng>(
    model: &AcLite,
    params: &ModelParams,
    features: &VisualFeatures,
    max_len: usize,
    rng: &mut R,
) -> Result<Sample> {
    let prepared = model.prepare(params, features)?;
    sample_prepared(model, params, &prepared, max_len, rng)
}

pub fn sample_prepared<R: Rng>(
    model: &AcLite,
    params: &ModelParams,
    prepared: &PreparedFeatures,
    max_len: usize,
    rng: &mut R,
) -> Result<Sample> {
    check_max_len(max_len)?;
    let mut state = model.initial_state();
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    while tokens.len() < max_len {
        let out = model.infer_step(params, prepared, &state)?;
        let dist = WeightedIndex::new(&out.probs)
            .map_err(|e| Error::NumericDomain(format!("cannot sample from output distribution: {e}")))?;
        let tok = dist.sample(rng);
        tokens.push(tok);
        log_probs.push(out.log_probs[tok]);
        if tok == EOS {
            break;
        }
        state = out.new_state;
        state.prev_token = tok;
    }
    Ok(Sample { tokens, log_probs })
}

/// Summed per-step log-probability of a generated sequence, accumulated in
/// the same order as beam search.
pub fn sequence_score(model: &AcLite, params: &ModelParams, prepared: &PreparedFeatures, tokens: &[usize]) -> Result<f64> {
    let mut state = model.initial_state();
    let mut total = 0.0;
    for &tok in tokens {
        let out = model.infer_step(params, prepared, &state)?;
        total += out.log_probs[tok];
        state = out.new_state;
        state.prev_token = tok;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::BOS;
    use crate::model::{ModelConfig, Wiring};

    fn tiny(vocab: usize, seed: u64) -> (AcLite, ModelParams, VisualFeatures) {
        let cfg = ModelConfig {
            feature_dim: 4,
            grid_height: 1,
            grid_width: 3,
            hidden_dim: 5,
            attention_dim: 4,
            embed_dim: 3,
            vocab_size: vocab,
            wiring: Wiring::ButdStyle,
            ..ModelConfig::published()
        };
        let model = AcLite::new(cfg).unwrap();
        let mut params = model.init_params(seed);
        // Sharper output distributions make ranking differences visible.
        for w in params.get_mut("output.weight").unwrap().data_mut() {
            *w *= 4.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let data = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = VisualFeatures::from_matrix(Tensor::matrix(4, 3, data).unwrap()).unwrap();
        (model, params, feats)
    }

    fn force_eos(model: &AcLite, params: &mut ModelParams) {
        params.get_mut("output.weight").unwrap().data_mut().fill(0.0);
        let mut bias = vec![0.0; model.config.vocab_size];
        bias[EOS] = 50.0;
        params.get_mut("output.bias").unwrap().data_mut().copy_from_slice(&bias);
    }

    /// All sequences of at most `max_len` tokens that end in EOS or have
    /// length `max_len`, EOS only in final position.
    fn enumerate(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
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

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn forced_eos_gives_empty_caption() {
        let (model, mut params, feats) = tiny(5, 1);
        force_eos(&model, &mut params);
        let g = greedy_decode(&model, &params, &feats, 16).unwrap();
        assert_eq!(g, vec![EOS]);
        assert!(strip_eos(&g).is_empty());
        let b = beam_decode(&model, &params, &feats, 3, 16).unwrap();
        assert_eq!(b[0].tokens, vec![EOS]);
    }

    #[test]
    fn greedy_matches_instrumented_trace() {
        let (model, params, feats) = tiny(5, 2);
        let prepared = model.prepare(&params, &feats).unwrap();
        let mut trace = Vec::new();
        let mut state = model.initial_state();
        for _ in 0..6 {
            let out = model.infer_step(&params, &prepared, &state).unwrap();
            let p = &out.probs;
            let mut best = 0;
            for i in 0..p.len() {
                if p[i] > p[best] {
                    best = i;
                }
            }
            trace.push(best);
            if best == EOS {
                break;
            }
            state = out.new_state;
            state.prev_token = best;
        }
        assert_eq!(greedy_decode(&model, &params, &feats, 6).unwrap(), trace);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..20 {
            let (model, params, feats) = tiny(5, seed);
            let g = greedy_decode(&model, &params, &feats, 5).unwrap();
            let b = beam_decode(&model, &params, &feats, 1, 5).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g, "seed {seed}");
        }
    }

    #[test]
    fn wide_beam_finds_exhaustive_argmax() {
        for seed in 0..10 {
            let (model, params, feats) = tiny(5, 100 + seed);
            let prepared = model.prepare(&params, &feats).unwrap();
            let best = enumerate(5, 3)
                .into_iter()
                .map(|s| (sequence_score(&model, &params, &prepared, &s).unwrap(), s))
                .min_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)))
                .unwrap();
            let beams = beam_prepared(&model, &params, &prepared, 125, 3).unwrap();
            assert_eq!(beams[0].tokens, best.1, "seed {seed}");
            assert_eq!(beams[0].log_prob, best.0);
        }
    }

    #[test]
    fn beam_hypotheses_are_well_formed_and_scored() {
        let (model, params, feats) = tiny(6, 7);
        let prepared = model.prepare(&params, &feats).unwrap();
        let beams = beam_prepared(&model, &params, &prepared, 4, 4).unwrap();
        assert_eq!(beams.len(), 4);
        for w in beams.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for b in &beams {
            assert_eq!(b.finished, b.tokens.last() == Some(&EOS));
            assert!(b.finished || b.tokens.len() == 4);
            assert!(b.tokens[..b.tokens.len() - 1].iter().all(|&t| t != EOS));
            assert_eq!(b.log_prob, sequence_score(&model, &params, &prepared, &b.tokens).unwrap());
        }
    }

    #[test]
    fn larger_beams_never_score_worse() {
        for seed in 0..8 {
            let (model, params, feats) = tiny(6, 40 + seed);
            let prepared = model.prepare(&params, &feats).unwrap();
            let greedy = greedy_prepared(&model, &params, &prepared, 5).unwrap();
            let mut prev = sequence_score(&model, &params, &prepared, &greedy).unwrap();
            for k in [1, 2, 4, 8, 16] {
                let top = beam_prepared(&model, &params, &prepared, k, 5).unwrap()[0].log_prob;
                assert!(top >= prev - 1e-12, "seed {seed} beam {k}");
                prev = prev.max(top);
            }
        }
    }

    #[test]
    fn beam_is_deterministic_and_validates_size() {
        let (model, params, feats) = tiny(5, 3);
        let a = beam_decode(&model, &params, &feats, 3, 6).unwrap();
        let b = beam_decode(&model, &params, &feats, 3, 6).unwrap();
        assert_eq!(a, b);
        assert!(matches!(beam_decode(&model, &params, &feats, 0, 6), Err(Error::Config(_))));
        assert!(matches!(greedy_decode(&model, &params, &feats, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_degenerate_distribution() {
        let (model, mut params, feats) = tiny(5, 4);
        force_eos(&model, &mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = sample_decode(&model, &params, &feats, 8, &mut rng).unwrap();
            assert_eq!(s.tokens, vec![EOS]);
        }
    }

    #[test]
    fn sampled_log_probs_match_recomputation() {
        let (model, params, feats) = tiny(5, 5);
        let prepared = model.prepare(&params, &feats).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = sample_prepared(&model, &params, &prepared, 6, &mut rng).unwrap();
            assert!(s.tokens.last() == Some(&EOS) || s.tokens.len() == 6);
            let mut state = model.initial_state();
            for (&tok, &lp) in s.tokens.iter().zip(&s.log_probs) {
                let out = model.infer_step(&params, &prepared, &state).unwrap();
                assert!((lp - out.probs[tok].ln()).abs() < 1e-12);
                state = out.new_state;
                state.prev_token = tok;
            }
        }
    }

    #[test]
    fn first_token_frequencies_match_distribution() {
        let (model, params, feats) = tiny(5, 6);
        let prepared = model.prepare(&params, &feats).unwrap();
        let p1 = model.infer_step(&params, &prepared, &model.initial_state()).unwrap().probs;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let s = sample_prepared(&model, &params, &prepared, 1, &mut rng).unwrap();
            counts[s.tokens[0]] += 1;
        }
        for (c, p) in counts.iter().zip(&p1) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma + 1.0, "{counts:?} vs {p1:?}");
        }
        assert_eq!(model.initial_state().prev_token, BOS);
    }
}
