//! Linear maps, embedding tables and the GRU cell, built on the tape.
//!
//! Layers hold parameter *names*; the weights themselves live in a
//! [`ModelParams`] store and are borrowed by the tape during a pass.

use rand::Rng;

use crate::autodiff::{xavier_uniform, ModelParams, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_len(tape: &Tape, v: Var, expect: usize, what: &str) -> Result<()> {
    if tape.shape(v) != [expect] {
        return Err(Error::dim(format!(
            "{what} expects a vector of length {expect}, got shape {:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// Affine map `W x + b` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: bias.then(|| format!("{prefix}.bias")),
            in_features,
            out_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }

    pub fn init<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) {
        params.insert(
            &self.weight,
            xavier_uniform(
                rng,
                vec![self.out_features, self.in_features],
                self.in_features,
                self.out_features,
            ),
        );
        if let Some(b) = &self.bias {
            params.insert(b, Tensor::zeros(vec![self.out_features]).expect("positive extent"));
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_len(tape, x, self.in_features, &self.weight)?;
        let w = tape.param(&self.weight)?;
        let y = tape.matvec(w, x)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Applies the map to every column of `x: [in × n]`.
    pub fn forward_columns(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let y = tape.matmul(w, x)?;
        match &self.bias {
            Some(b) => {
                let n = tape.shape(x)[1];
                let b = tape.param(b)?;
                let col = tape.reshape(b, vec![self.out_features, 1])?;
                let ones = tape.constant(vec![1, n], vec![1.0; n])?;
                let tiled = tape.matmul(col, ones)?;
                tape.add(y, tiled)
            }
            None => Ok(y),
        }
    }
}

/// Word embedding table `[vocab × dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: String,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: &str, vocab_size: usize, dim: usize) -> Self {
        Embedding {
            table: name.to_string(),
            vocab_size,
            dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.vocab_size * self.dim
    }

    pub fn init<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) {
        params.insert(
            &self.table,
            xavier_uniform(rng, vec![self.vocab_size, self.dim], self.vocab_size, self.dim),
        );
    }

    pub fn forward(&self, tape: &mut Tape, token: usize) -> Result<Var> {
        if token >= self.vocab_size {
            return Err(Error::Vocabulary(format!(
                "token id {token} out of range for vocabulary of size {}",
                self.vocab_size
            )));
        }
        let t = tape.param(&self.table)?;
        tape.gather_row(t, token)
    }
}

/// Fully gated GRU with the reset gate applied before the candidate
/// projection:
///
/// ```text
/// z = σ(W_z [x; h] + b_z)
/// r = σ(W_r [x; h] + b_r)
/// ĥ = tanh(W_h [x; r ⊙ h] + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub prefix: String,
    pub input_size: usize,
    pub hidden_size: usize,
    pub bias: bool,
}

impl GruCell {
    pub const GATES: [&'static str; 3] = ["z", "r", "h"];

    pub fn new(prefix: &str, input_size: usize, hidden_size: usize, bias: bool) -> Self {
        GruCell {
            prefix: prefix.to_string(),
            input_size,
            hidden_size,
            bias,
        }
    }

    pub fn weight_name(&self, gate: &str) -> String {
        format!("{}.w_{gate}", self.prefix)
    }

    pub fn bias_name(&self, gate: &str) -> String {
        format!("{}.b_{gate}", self.prefix)
    }

    pub fn num_params(&self) -> usize {
        let per_gate = self.hidden_size * (self.input_size + self.hidden_size) + if self.bias { self.hidden_size } else { 0 };
        3 * per_gate
    }

    pub fn init<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) {
        let fan_in = self.input_size + self.hidden_size;
        for gate in Self::GATES {
            params.insert(
                self.weight_name(gate),
                xavier_uniform(rng, vec![self.hidden_size, fan_in], fan_in, self.hidden_size),
            );
            if self.bias {
                params.insert(
                    self.bias_name(gate),
                    Tensor::zeros(vec![self.hidden_size]).expect("positive extent"),
                );
            }
        }
    }

    fn gate(&self, tape: &mut Tape, gate: &str, input: Var) -> Result<Var> {
        let w = tape.param(&self.weight_name(gate))?;
        let y = tape.matvec(w, input)?;
        if self.bias {
            let b = tape.param(&self.bias_name(gate))?;
            tape.add(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
        check_len(tape, x, self.input_size, &self.prefix)?;
        check_len(tape, h_prev, self.hidden_size, &self.prefix)?;
        let xh = tape.concat(&[x, h_prev])?;
        let z_pre = self.gate(tape, "z", xh)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = self.gate(tape, "r", xh)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h_prev)?;
        let xrh = tape.concat(&[x, rh])?;
        let cand_pre = self.gate(tape, "h", xrh)?;
        let cand = tape.tanh(cand_pre);
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h_prev)?;
        let new = tape.mul(z, cand)?;
        tape.add(old, new)
    }
}
