//! The captioner: an attention GRU, low-rank bilinear attention over region
//! features, a language GRU and the output projection.
//!
//! One decoding step, with `ā` the mean region feature:
//!
//! ```text
//! x_t   = [h^G_{t-1} : ā]            (literal)
//!       = [h^G_{t-1} : ā : E[w_{t-1}]] (butd-style)
//! h^A_t = GRU_A(x_t, h^A_{t-1})
//! β_t[i] = ω_Aᵀ((W_e^h h^A_t) ⊙ (W_e^a a_i))
//! α_t   = softmax(β_t),   â_t = Σ_i α_t[i] a_i
//! h^G_t = GRU(â_t, h^G_{t-1})
//! ŷ_t   = softmax(W_o h^G_t)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, xavier_uniform, ModelParams, Tape, Tensor, Var};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{Embedding, GruCell, Linear};
use crate::vision::VisualFeatures;

/// Whether the previous word feeds the attention GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wiring {
    /// Exactly the published equations: no word input anywhere.
    #[serde(rename = "literal")]
    Literal,
    /// Previous word embedding appended to the attention GRU input.
    #[serde(rename = "butd-style")]
    ButdStyle,
}

impl std::str::FromStr for Wiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Wiring::Literal),
            "butd-style" | "butd" => Ok(Wiring::ButdStyle),
            other => Err(Error::Config(format!("unknown wiring mode {other:?}"))),
        }
    }
}

/// Architecture extents and bias flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `d_a`, channels per region feature.
    pub feature_dim: usize,
    /// `n_h`
    pub grid_height: usize,
    /// `n_w`
    pub grid_width: usize,
    /// `d_h`, shared by both GRUs.
    pub hidden_dim: usize,
    /// `d_e`, bilinear attention embedding width.
    pub attention_dim: usize,
    /// `d_w`, word embedding width (butd-style wiring only).
    pub embed_dim: usize,
    /// `|V|`, including reserved tokens.
    pub vocab_size: usize,
    pub wiring: Wiring,
    pub gru_bias: bool,
    pub output_bias: bool,
    pub attention_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::published()
    }
}

impl ModelConfig {
    /// Published geometry: 1024×14×14 features, 512-wide hiddens and
    /// attention embedding, 12,912-entry vocabulary.
    pub fn published() -> Self {
        ModelConfig {
            feature_dim: 1024,
            grid_height: 14,
            grid_width: 14,
            hidden_dim: 512,
            attention_dim: 512,
            embed_dim: 512,
            vocab_size: 12_912,
            wiring: Wiring::ButdStyle,
            gru_bias: true,
            output_bias: true,
            attention_bias: false,
        }
    }

    /// Small geometry for desk-scale runs and tests.
    pub fn desk() -> Self {
        ModelConfig {
            feature_dim: 64,
            grid_height: 4,
            grid_width: 4,
            hidden_dim: 32,
            attention_dim: 32,
            embed_dim: 32,
            vocab_size: 32,
            ..Self::published()
        }
    }

    pub fn num_regions(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("feature_dim", self.feature_dim),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must include the reserved tokens".into()));
        }
        Ok(())
    }

    /// Input width of the attention GRU.
    pub fn attention_input_dim(&self) -> usize {
        let word = match self.wiring {
            Wiring::Literal => 0,
            Wiring::ButdStyle => self.embed_dim,
        };
        self.hidden_dim + self.feature_dim + word
    }
}

/// Parameter names of the bilinear attention weight `ω_A`.
pub const OMEGA: &str = "att.omega";

/// Layer definitions; weights live in a separate [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AcLite {
    pub config: ModelConfig,
    pub gru_att: GruCell,
    /// `W_e^h: [d_e × d_h]`
    pub att_hidden: Linear,
    /// `W_e^a: [d_e × d_a]`
    pub att_feature: Linear,
    pub gru_lang: GruCell,
    /// `W_o: [|V| × d_h]`
    pub output: Linear,
    pub embedding: Option<Embedding>,
}

/// Tape handles for one image's features.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    /// `A: [d_a × n_a]`
    pub regions: Var,
    /// `ā: [d_a]`
    pub mean: Var,
    /// `W_e^a A: [d_e × n_a]`, shared by every step.
    pub projected: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub h_att: Var,
    pub h_lang: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub beta: Var,
    pub alpha: Var,
    pub attended: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub state: TapeState,
    pub logits: Var,
    pub probs: Var,
    pub attention: AttentionVars,
}

/// Result of a teacher-forced pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub loss: Var,
    pub steps: Vec<StepVars>,
}

/// Plain-value decoder state between inference steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h_att: Vec<f64>,
    pub h_lang: Vec<f64>,
    pub prev_token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub alpha: Vec<f64>,
    pub attended: Vec<f64>,
    /// Pre-softmax scores.
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub new_state: DecoderState,
    pub attention: AttentionOutput,
}

/// Per-image values reused by every inference step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFeatures {
    regions: Tensor,
    mean: Vec<f64>,
    projected: Tensor,
}

impl PreparedFeatures {
    pub fn regions(&self) -> &Tensor {
        &self.regions
    }
}

impl AcLite {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(AcLite {
            gru_att: GruCell::new("gru_att", c.attention_input_dim(), c.hidden_dim, c.gru_bias),
            att_hidden: Linear::new("att.hidden", c.hidden_dim, c.attention_dim, c.attention_bias),
            att_feature: Linear::new("att.feature", c.feature_dim, c.attention_dim, c.attention_bias),
            gru_lang: GruCell::new("gru_lang", c.feature_dim, c.hidden_dim, c.gru_bias),
            output: Linear::new("output", c.hidden_dim, c.vocab_size, c.output_bias),
            embedding: match c.wiring {
                Wiring::ButdStyle => Some(Embedding::new("embed", c.vocab_size, c.embed_dim)),
                Wiring::Literal => None,
            },
            config,
        })
    }

    /// Seeded parameter initialization: Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        self.gru_att.init(&mut params, &mut rng);
        self.att_hidden.init(&mut params, &mut rng);
        self.att_feature.init(&mut params, &mut rng);
        let d_e = self.config.attention_dim;
        params.insert(OMEGA, xavier_uniform(&mut rng, vec![d_e], d_e, 1));
        self.gru_lang.init(&mut params, &mut rng);
        self.output.init(&mut params, &mut rng);
        if let Some(e) = &self.embedding {
            e.init(&mut params, &mut rng);
        }
        params
    }

    /// Checks that `params` holds exactly this architecture's tensors.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let reference = self.init_params(0);
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Config(format!("parameter {name:?} missing")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Config(format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }

    fn check_features(&self, features: &VisualFeatures) -> Result<()> {
        let (d, n) = (features.feature_dim(), features.num_regions());
        if d != self.config.feature_dim || n != self.config.num_regions() {
            return Err(Error::dim(format!(
                "features are {d}×{n}, model expects {}×{}",
                self.config.feature_dim,
                self.config.num_regions()
            )));
        }
        Ok(())
    }

    // ------------------------------------------------------------ on tape

    pub fn feature_vars<'p>(&self, tape: &mut Tape<'p>, features: &'p VisualFeatures) -> Result<FeatureVars> {
        self.check_features(features)?;
        let r = features.regions();
        let regions = tape.constant_ref(r.shape().to_vec(), r.data())?;
        let mean = tape.mean_over_columns(regions)?;
        let projected = self.att_feature.forward_columns(tape, regions)?;
        Ok(FeatureVars {
            regions,
            mean,
            projected,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Result<TapeState> {
        let d = self.config.hidden_dim;
        Ok(TapeState {
            h_att: tape.constant(vec![d], vec![0.0; d])?,
            h_lang: tape.constant(vec![d], vec![0.0; d])?,
        })
    }

    /// Attention GRU update followed by bilinear attention. `word` must be
    /// present exactly when the wiring is butd-style.
    pub fn attention_step(
        &self,
        tape: &mut Tape,
        features: &FeatureVars,
        state: &TapeState,
        word: Option<Var>,
    ) -> Result<(Var, AttentionVars)> {
        let x = match (self.config.wiring, word) {
            (Wiring::Literal, None) => tape.concat(&[state.h_lang, features.mean])?,
            (Wiring::ButdStyle, Some(w)) => tape.concat(&[state.h_lang, features.mean, w])?,
            (Wiring::Literal, Some(_)) => return Err(Error::Config("literal wiring takes no word input".into())),
            (Wiring::ButdStyle, None) => return Err(Error::Config("butd-style wiring needs a word input".into())),
        };
        let h_att = self.gru_att.step(tape, x, state.h_att)?;
        let query = self.att_hidden.forward(tape, h_att)?;
        let joint = tape.mul_col_broadcast(features.projected, query)?;
        let omega = tape.param(OMEGA)?;
        let beta = tape.vecmat(omega, joint)?;
        let alpha = tape.softmax(beta, 0)?;
        let attended = tape.matvec(features.regions, alpha)?;
        Ok((h_att, AttentionVars { beta, alpha, attended }))
    }

    /// Language GRU update and output distribution. Returns `(h^G, logits, probs)`.
    pub fn decode_step(&self, tape: &mut Tape, attended: Var, h_lang: Var) -> Result<(Var, Var, Var)> {
        let h = self.gru_lang.step(tape, attended, h_lang)?;
        let logits = self.output.forward(tape, h)?;
        let probs = tape.softmax(logits, 0)?;
        Ok((h, logits, probs))
    }

    pub fn step(&self, tape: &mut Tape, features: &FeatureVars, state: &TapeState, prev_token: usize) -> Result<StepVars> {
        let word = match &self.embedding {
            Some(e) => Some(e.forward(tape, prev_token)?),
            None => {
                if prev_token >= self.config.vocab_size {
                    return Err(Error::Vocabulary(format!(
                        "token id {prev_token} out of range for vocabulary of size {}",
                        self.config.vocab_size
                    )));
                }
                None
            }
        };
        let (h_att, attention) = self.attention_step(tape, features, state, word)?;
        let (h_lang, logits, probs) = self.decode_step(tape, attention.attended, state.h_lang)?;
        Ok(StepVars {
            state: TapeState { h_att, h_lang },
            logits,
            probs,
            attention,
        })
    }

    /// Runs one step per input token of `prev_tokens`, starting from zero
    /// state.
    pub fn unroll(&self, tape: &mut Tape, features: &FeatureVars, prev_tokens: &[usize]) -> Result<Vec<StepVars>> {
        let mut state = self.zero_state(tape)?;
        let mut steps = Vec::with_capacity(prev_tokens.len());
        for &tok in prev_tokens {
            let s = self.step(tape, features, &state, tok)?;
            state = s.state;
            steps.push(s);
        }
        Ok(steps)
    }

    /// Teacher-forced pass over `tokens = [BOS, w_1, …, w_n, EOS]`, returning
    /// the mean next-token cross-entropy over the `n + 1` predictions.
    pub fn forward_teacher_forced(&self, tape: &mut Tape, features: &FeatureVars, tokens: &[usize]) -> Result<TeacherForced> {
        validate_caption(tokens, self.config.vocab_size)?;
        let steps = self.unroll(tape, features, &tokens[..tokens.len() - 1])?;
        let rows: Vec<Var> = steps.iter().map(|s| s.logits).collect();
        let logits = tape.stack(&rows)?;
        let targets = &tokens[1..];
        let loss = tape.cross_entropy(logits, targets, &vec![true; targets.len()])?;
        Ok(TeacherForced { loss, steps })
    }

    /// Sum of `ln ŷ_t[tokens[t+1]]` along a caption, recorded for gradients.
    pub fn sequence_log_prob(&self, tape: &mut Tape, features: &FeatureVars, tokens: &[usize]) -> Result<Var> {
        if tokens.len() < 2 || tokens[0] != BOS {
            return Err(Error::Data("sequence must start with BOS and hold at least one token".into()));
        }
        let steps = self.unroll(tape, features, &tokens[..tokens.len() - 1])?;
        let mut picks = Vec::with_capacity(steps.len());
        for (s, &target) in steps.iter().zip(&tokens[1..]) {
            let lp = tape.log_softmax(s.logits)?;
            picks.push(tape.pick(lp, target)?);
        }
        let columns = reshape_scalars(tape, &picks)?;
        let all = tape.concat(&columns)?;
        Ok(tape.sum(all))
    }

    // --------------------------------------------------------- inference

    pub fn prepare(&self, params: &ModelParams, features: &VisualFeatures) -> Result<PreparedFeatures> {
        let mut tape = Tape::with_params(params);
        let fv = self.feature_vars(&mut tape, features)?;
        Ok(PreparedFeatures {
            regions: features.regions().clone(),
            mean: tape.value(fv.mean).to_vec(),
            projected: tape.to_tensor(fv.projected),
        })
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            h_att: vec![0.0; self.config.hidden_dim],
            h_lang: vec![0.0; self.config.hidden_dim],
            prev_token: BOS,
        }
    }

    /// One inference step from plain-value state.
    pub fn infer_step(&self, params: &ModelParams, prepared: &PreparedFeatures, state: &DecoderState) -> Result<StepOutput> {
        let d = self.config.hidden_dim;
        if state.h_att.len() != d || state.h_lang.len() != d {
            return Err(Error::dim(format!("decoder state must have hidden extent {d}")));
        }
        let mut tape = Tape::with_params(params);
        let regions = tape.constant_ref(prepared.regions.shape().to_vec(), prepared.regions.data())?;
        let mean = tape.constant_ref(vec![prepared.mean.len()], &prepared.mean)?;
        let projected = tape.constant_ref(prepared.projected.shape().to_vec(), prepared.projected.data())?;
        let fv = FeatureVars {
            regions,
            mean,
            projected,
        };
        let ts = TapeState {
            h_att: tape.constant(vec![d], state.h_att.clone())?,
            h_lang: tape.constant(vec![d], state.h_lang.clone())?,
        };
        let out = self.step(&mut tape, &fv, &ts, state.prev_token)?;
        let logits = tape.value(out.logits).to_vec();
        Ok(StepOutput {
            log_probs: log_softmax(&logits),
            logits,
            probs: tape.value(out.probs).to_vec(),
            new_state: DecoderState {
                h_att: tape.value(out.state.h_att).to_vec(),
                h_lang: tape.value(out.state.h_lang).to_vec(),
                prev_token: state.prev_token,
            },
            attention: AttentionOutput {
                alpha: tape.value(out.attention.alpha).to_vec(),
                attended: tape.value(out.attention.attended).to_vec(),
                beta: tape.value(out.attention.beta).to_vec(),
            },
        })
    }

    /// Teacher-forced loss as a plain number, with per-step probabilities and
    /// attention weights.
    #[allow(clippy::type_complexity)]
    pub fn teacher_forced_loss(
        &self,
        params: &ModelParams,
        features: &VisualFeatures,
        tokens: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut tape = Tape::with_params(params);
        let fv = self.feature_vars(&mut tape, features)?;
        let tf = self.forward_teacher_forced(&mut tape, &fv, tokens)?;
        let probs = tf.steps.iter().map(|s| tape.value(s.probs).to_vec()).collect();
        let alphas = tf.steps.iter().map(|s| tape.value(s.attention.alpha).to_vec()).collect();
        Ok((tape.scalar(tf.loss), probs, alphas))
    }
}

fn reshape_scalars(tape: &mut Tape, scalars: &[Var]) -> Result<Vec<Var>> {
    scalars.iter().map(|s| tape.reshape(*s, vec![1])).collect()
}

fn validate_caption(tokens: &[usize], vocab_size: usize) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::Data("caption needs at least BOS and EOS".into()));
    }
    if tokens[0] != BOS || tokens[tokens.len() - 1] != EOS {
        return Err(Error::Data("caption must start with BOS and end with EOS".into()));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} out of range for vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
