use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_scaled, apply, epoch_rng, shuffled_batches, TrainConfig, TrainSet};
use crate::autodiff::{AdamState, ModelParams, NamedGrads, Tape};
use crate::data::BOS;
use crate::decoding::{greedy_prepared, sample_prepared, strip_eos};
use crate::error::{Error, Result};
use crate::metrics::CiderD;
use crate::model::AcLite;

/// Sequence-level reward for a generated caption of one image.
pub trait Reward {
    fn reward(&self, image: usize, hypothesis: &[usize]) -> Result<f64>;
}

/// CIDEr-D against the image's references, with document frequencies
/// frozen from the reference corpus given at construction.
pub struct CiderReward {
    scorer: CiderD<usize>,
    references: Vec<Vec<Vec<usize>>>,
}

impl CiderReward {
    pub fn new(references: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let scorer = CiderD::new(&references).map_err(|e| Error::Reward(e.to_string()))?;
        Ok(CiderReward { scorer, references })
    }
}

impl Reward for CiderReward {
    fn reward(&self, image: usize, hypothesis: &[usize]) -> Result<f64> {
        let refs = self
            .references
            .get(image)
            .ok_or_else(|| Error::Reward(format!("no references for image {image}")))?;
        if refs.is_empty() {
            return Err(Error::Reward(format!("image {image} has no references")));
        }
        self.scorer.score(hypothesis, refs).map_err(|e| Error::Reward(e.to_string()))
    }
}

/// Same reward for every caption.
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn reward(&self, _image: usize, _hypothesis: &[usize]) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScstStats {
    pub sample_reward: f64,
    pub greedy_reward: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstLog {
    pub epoch: usize,
    pub sample_reward: f64,
    pub greedy_reward: f64,
}

/// Mean over `images` of `∇[−(r(sample) − r(greedy)) · Σ_t ln ŷ_t[sample_t]]`,
/// one sample per image. Returns mean rewards alongside.
pub fn scst_gradients<R: Rng>(
    model: &AcLite,
    params: &ModelParams,
    data: &TrainSet,
    images: &[usize],
    reward: &dyn Reward,
    max_len: usize,
    rng: &mut R,
) -> Result<(NamedGrads, ScstStats)> {
    let mut sum: NamedGrads = params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.numel()])).collect();
    let mut stats = ScstStats::default();
    for &img in images {
        let feats = data
            .features
            .get(img)
            .ok_or_else(|| Error::Data(format!("image index {img} out of range")))?;
        let prepared = model.prepare(params, feats)?;
        let sample = sample_prepared(model, params, &prepared, max_len, rng)?;
        let greedy = greedy_prepared(model, params, &prepared, max_len)?;
        let r_s = reward.reward(img, strip_eos(&sample.tokens))?;
        let r_g = reward.reward(img, strip_eos(&greedy))?;
        stats.sample_reward += r_s;
        stats.greedy_reward += r_g;
        stats.images += 1;
        let advantage = r_s - r_g;
        if advantage == 0.0 {
            continue;
        }
        let mut seq = Vec::with_capacity(sample.tokens.len() + 1);
        seq.push(BOS);
        seq.extend_from_slice(&sample.tokens);
        let mut tape = Tape::with_params(params);
        let fv = model.feature_vars(&mut tape, feats)?;
        let log_prob = model.sequence_log_prob(&mut tape, &fv, &seq)?;
        tape.backward(log_prob)?;
        add_scaled(&mut sum, tape.param_grads()?, -advantage);
    }
    let n = images.len().max(1) as f64;
    for g in sum.values_mut() {
        g.iter_mut().for_each(|x| *x /= n);
    }
    stats.sample_reward /= n;
    stats.greedy_reward /= n;
    Ok((sum, stats))
}

#[allow(clippy::too_many_arguments)]
pub fn scst_step<R: Rng>(
    model: &AcLite,
    params: &mut ModelParams,
    adam: &mut AdamState,
    data: &TrainSet,
    images: &[usize],
    reward: &dyn Reward,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ScstStats> {
    let (grads, stats) = scst_gradients(model, params, data, images, reward, config.max_len, rng)?;
    apply(params, adam, grads, config.grad_clip)?;
    Ok(stats)
}

/// SCST epochs over shuffled image batches.
#[allow(clippy::too_many_arguments)]
pub fn train_scst<F: FnMut(&ScstLog)>(
    model: &AcLite,
    params: &mut ModelParams,
    adam: &mut AdamState,
    data: &TrainSet,
    reward: &dyn Reward,
    config: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<ScstLog>> {
    config.validate()?;
    if data.features.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    model.check_params(params)?;
    let mut logs = Vec::new();
    for epoch in start_epoch..config.epochs {
        adam.config.learning_rate = config.learning_rate_at(epoch);
        // Sampling draws from a stream separate from the shuffling one.
        let mut rng = epoch_rng(config.seed ^ 0x5c57, epoch);
        let (mut s, mut g, mut n) = (0.0, 0.0, 0usize);
        for batch in shuffled_batches(data.features.len(), config.batch_size, config.seed, epoch) {
            let st = scst_step(model, params, adam, data, &batch, reward, config, &mut rng)?;
            s += st.sample_reward * st.images as f64;
            g += st.greedy_reward * st.images as f64;
            n += st.images;
        }
        let log = ScstLog {
            epoch,
            sample_reward: s / n.max(1) as f64,
            greedy_reward: g / n.max(1) as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
