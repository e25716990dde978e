//! Cross-entropy training, self-critical fine-tuning and checkpoints.

mod checkpoint;
mod scst;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sidecar_path, Checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use scst::{scst_gradients, scst_step, train_scst, CiderReward, ConstantReward, Reward, ScstLog, ScstStats};

use crate::autodiff::{AdamConfig, AdamState, ModelParams, NamedGrads, Tape};
use crate::data::{resolve, DatasetManifest, Split, Vocabulary, BOS, EOS, MAX_CAPTION_LEN};
use crate::decoding::argmax;
use crate::error::{Error, Result};
use crate::model::AcLite;
use crate::vision::{FeatureProvider, FeatureSource, VisualFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMetric {
    Cider,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub reward: RewardMetric,
    /// Global L2 norm limit on the averaged batch gradient.
    pub grad_clip: Option<f64>,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            epochs: 30,
            batch_size: 50,
            max_len: MAX_CAPTION_LEN,
            seed: 0,
            reward: RewardMetric::Cider,
            grad_clip: None,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic corpus: small batches and a faster rate.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            epochs: 200,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || d.factor.is_nan() || d.factor <= 0.0 {
                return Err(Error::Config("lr_decay needs a positive factor and period".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub image: usize,
    /// `[BOS, …, EOS]`
    pub tokens: Vec<usize>,
}

/// Features, captions and per-image reference id sequences for one split.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub image_ids: Vec<String>,
    pub features: Vec<VisualFeatures>,
    pub examples: Vec<TrainExample>,
    /// Interior ids (no BOS/EOS) of every caption, per image.
    pub references: Vec<Vec<Vec<usize>>>,
}

impl TrainSet {
    pub fn new(image_ids: Vec<String>, features: Vec<VisualFeatures>, captions: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if image_ids.len() != features.len() || features.len() != captions.len() {
            return Err(Error::Data("image ids, features and captions differ in length".into()));
        }
        let mut examples = Vec::new();
        let mut references = Vec::with_capacity(captions.len());
        for (image, caps) in captions.into_iter().enumerate() {
            let mut refs = Vec::with_capacity(caps.len());
            for tokens in caps {
                if tokens.len() < 2 || tokens[0] != BOS || tokens[tokens.len() - 1] != EOS {
                    return Err(Error::Data(format!("caption of image {image} is not BOS … EOS")));
                }
                refs.push(tokens[1..tokens.len() - 1].to_vec());
                examples.push(TrainExample { image, tokens });
            }
            references.push(refs);
        }
        Ok(TrainSet {
            image_ids,
            features,
            examples,
            references,
        })
    }

    /// Loads every image of `split` and encodes its captions.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        manifest_path: &Path,
        vocab: &Vocabulary,
        provider: &FeatureProvider,
        split: Split,
        max_len: usize,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut feats = Vec::new();
        let mut caps = Vec::new();
        for img in manifest.split(split) {
            let rel = img.features.as_deref().ok_or_else(|| {
                Error::Data(format!(
                    "image {:?} has no feature file; raw images are not supported here",
                    img.id
                ))
            })?;
            let path = resolve(manifest_path, rel);
            feats.push(provider.features(FeatureSource::File(&path))?);
            ids.push(img.id.clone());
            caps.push(
                img.captions
                    .iter()
                    .map(|c| vocab.encode(&crate::data::tokenize(c), max_len))
                    .collect(),
            );
        }
        Self::new(ids, feats, caps)
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub token_accuracy: f64,
    pub learning_rate: f64,
}

/// Summed teacher-forced statistics over a set of examples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct XeTotals {
    pub loss_sum: f64,
    pub examples: usize,
    pub correct: usize,
    pub tokens: usize,
}

impl XeTotals {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.examples.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

fn add_scaled(sum: &mut NamedGrads, grads: NamedGrads, scale: f64) {
    if sum.is_empty() {
        for (k, mut g) in grads {
            g.iter_mut().for_each(|x| *x *= scale);
            sum.insert(k, g);
        }
        return;
    }
    for (k, g) in grads {
        let s = sum.get_mut(&k).expect("same parameter set");
        for (a, b) in s.iter_mut().zip(g) {
            *a += b * scale;
        }
    }
}

/// Mean gradient of the teacher-forced loss over `batch`, accumulated in
/// batch order.
pub fn xe_batch_gradients(
    model: &AcLite,
    params: &ModelParams,
    data: &TrainSet,
    batch: &[usize],
) -> Result<(NamedGrads, XeTotals)> {
    let mut sum = NamedGrads::new();
    let mut totals = XeTotals::default();
    for &i in batch {
        let ex = &data.examples[i];
        let mut tape = Tape::with_params(params);
        let fv = model.feature_vars(&mut tape, &data.features[ex.image])?;
        let tf = model.forward_teacher_forced(&mut tape, &fv, &ex.tokens)?;
        tape.backward(tf.loss)?;
        totals.loss_sum += tape.scalar(tf.loss);
        totals.examples += 1;
        for (step, &target) in tf.steps.iter().zip(&ex.tokens[1..]) {
            totals.tokens += 1;
            totals.correct += usize::from(argmax(tape.value(step.probs)) == target);
        }
        add_scaled(&mut sum, tape.param_grads()?, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    for g in sum.values_mut() {
        g.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((sum, totals))
}

pub(crate) fn clip_global_norm(grads: &mut NamedGrads, limit: f64) {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
}

pub(crate) fn apply(params: &mut ModelParams, adam: &mut AdamState, mut grads: NamedGrads, clip: Option<f64>) -> Result<()> {
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    for (name, g) in grads {
        params.get_mut(&name)?.set_grad(g)?;
    }
    adam.step(params)
}

/// Per-epoch shuffling stream; depends only on `(seed, epoch)` so resumed
/// runs reproduce uninterrupted ones.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Runs epochs `start_epoch..config.epochs`. Logged loss and accuracy are
/// measured on each batch before its update.
pub fn train_xe<F: FnMut(&EpochLog)>(
    model: &AcLite,
    params: &mut ModelParams,
    adam: &mut AdamState,
    data: &TrainSet,
    config: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    model.check_params(params)?;
    let mut logs = Vec::new();
    for epoch in start_epoch..config.epochs {
        adam.config.learning_rate = config.learning_rate_at(epoch);
        let mut totals = XeTotals::default();
        for batch in shuffled_batches(data.examples.len(), config.batch_size, config.seed, epoch) {
            let (grads, t) = xe_batch_gradients(model, params, data, &batch)?;
            totals.loss_sum += t.loss_sum;
            totals.examples += t.examples;
            totals.correct += t.correct;
            totals.tokens += t.tokens;
            apply(params, adam, grads, config.grad_clip)?;
        }
        let log = EpochLog {
            epoch,
            loss: totals.mean_loss(),
            token_accuracy: totals.accuracy(),
            learning_rate: adam.config.learning_rate,
        };
        if !log.loss.is_finite() {
            return Err(Error::NumericDomain(format!("loss became {} in epoch {epoch}", log.loss)));
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Teacher-forced loss and token accuracy over every example, without
/// updating anything.
pub fn evaluate_xe(model: &AcLite, params: &ModelParams, data: &TrainSet) -> Result<XeTotals> {
    let mut totals = XeTotals::default();
    for ex in &data.examples {
        let (loss, probs, _) = model.teacher_forced_loss(params, &data.features[ex.image], &ex.tokens)?;
        totals.loss_sum += loss;
        totals.examples += 1;
        for (p, &target) in probs.iter().zip(&ex.tokens[1..]) {
            totals.tokens += 1;
            totals.correct += usize::from(argmax(p) == target);
        }
    }
    Ok(totals)
}

#[cfg(test)]
mod tests;
