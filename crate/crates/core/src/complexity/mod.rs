//! Exact parameter and FLOP accounting for a captioner configuration.
//!
//! FLOPs are counted as multiply-accumulates (`Mac`): a `[m×k]·[k]` product
//! costs `m·k`, elementwise maps cost one per output element, a softmax over
//! `n` entries costs `2n`, and lookups, concatenations and reshapes are free.
//! `TwoMac` doubles every count.

mod encoders;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use encoders::{encoder_cost, EncoderCost, DEFAULT_ENCODER, ENCODERS};

use crate::error::{Error, Result};
use crate::model::{AcLite, ModelConfig, Wiring};
use crate::vision::TinyCnn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    #[serde(rename = "mac")]
    Mac,
    #[serde(rename = "2mac")]
    TwoMac,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::Mac => 1,
            Convention::TwoMac => 2,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Mac => "mac",
            Convention::TwoMac => "2mac",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(Convention::Mac),
            "2mac" => Ok(Convention::TwoMac),
            other => Err(Error::Config(format!(
                "unknown FLOPs convention {other:?}; expected mac or 2mac"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Attention,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: u64,
    pub component: Component,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub tensors: Vec<TensorCount>,
    pub attention: u64,
    pub decoder: u64,
    pub total: u64,
}

fn linear_tensors(
    out: &mut Vec<(String, Vec<usize>, Component)>,
    prefix: &str,
    inp: usize,
    outp: usize,
    bias: bool,
    c: Component,
) {
    out.push((format!("{prefix}.weight"), vec![outp, inp], c));
    if bias {
        out.push((format!("{prefix}.bias"), vec![outp], c));
    }
}

fn gru_tensors(
    out: &mut Vec<(String, Vec<usize>, Component)>,
    prefix: &str,
    inp: usize,
    hidden: usize,
    bias: bool,
    c: Component,
) {
    for g in ["z", "r", "h"] {
        out.push((format!("{prefix}.w_{g}"), vec![hidden, inp + hidden], c));
        if bias {
            out.push((format!("{prefix}.b_{g}"), vec![hidden], c));
        }
    }
}

/// Every trainable tensor with its extents, derived from the configuration
/// alone. The attention component holds the attention GRU, `W_e^h`, `W_e^a`
/// and `ω_A`; the decoder holds the language GRU, `W_o` and the embedding.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    let c = config;
    let mut t = Vec::new();
    gru_tensors(
        &mut t,
        "gru_att",
        c.attention_input_dim(),
        c.hidden_dim,
        c.gru_bias,
        Component::Attention,
    );
    linear_tensors(
        &mut t,
        "att.hidden",
        c.hidden_dim,
        c.attention_dim,
        c.attention_bias,
        Component::Attention,
    );
    linear_tensors(
        &mut t,
        "att.feature",
        c.feature_dim,
        c.attention_dim,
        c.attention_bias,
        Component::Attention,
    );
    t.push(("att.omega".into(), vec![c.attention_dim], Component::Attention));
    gru_tensors(
        &mut t,
        "gru_lang",
        c.feature_dim,
        c.hidden_dim,
        c.gru_bias,
        Component::Decoder,
    );
    linear_tensors(
        &mut t,
        "output",
        c.hidden_dim,
        c.vocab_size,
        c.output_bias,
        Component::Decoder,
    );
    if c.wiring == Wiring::ButdStyle {
        t.push(("embed".into(), vec![c.vocab_size, c.embed_dim], Component::Decoder));
    }
    let tensors: Vec<TensorCount> = t
        .into_iter()
        .map(|(name, shape, component)| TensorCount {
            count: shape.iter().map(|&e| e as u64).product(),
            name,
            shape,
            component,
        })
        .collect();
    let sum = |comp| tensors.iter().filter(|x| x.component == comp).map(|x| x.count).sum::<u64>();
    let (attention, decoder) = (sum(Component::Attention), sum(Component::Decoder));
    Ok(ParamCount {
        tensors,
        attention,
        decoder,
        total: attention + decoder,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub component: Component,
    pub params: u64,
    pub flops_per_invocation: u64,
    pub invocations: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        self.flops_per_invocation * self.invocations
    }
}

/// Which visual encoder cost goes into the report.
#[derive(Clone, Debug)]
pub enum EncoderChoice {
    Published(&'static EncoderCost),
    TinyCnn(TinyCnn),
    /// Precomputed features: no encoder cost.
    None,
}

impl EncoderChoice {
    pub fn named(name: &str) -> Result<Self> {
        Ok(EncoderChoice::Published(encoder_cost(name)?))
    }
}

/// Direct count for the tiny convolutional encoder: each layer's
/// convolution, bias add and `tanh`.
pub fn tiny_cnn_cost(cnn: &TinyCnn) -> (u64, u64) {
    let ch = cnn.layer_channels();
    let (mut h, mut w) = cnn.input_extents();
    let k = TinyCnn::KERNEL as u64;
    let (mut flops, mut params) = (0u64, 0u64);
    for l in 0..cnn.num_layers() {
        let (cin, cout) = (ch[l] as u64, ch[l + 1] as u64);
        h /= 2;
        w /= 2;
        let out = cout * (h * w) as u64;
        flops += out * cin * k * k + out + out;
        params += cout * cin * k * k + cout;
    }
    (flops, params)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishedTotals {
    pub mflops: f64,
    pub params_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub convention: Convention,
    pub seq_len: usize,
    pub encoder: String,
    pub layers: Vec<LayerCost>,
    pub encoder_mflops: f64,
    pub encoder_params_m: f64,
    pub attention_flops: u64,
    pub attention_params: u64,
    pub decoder_flops: u64,
    pub decoder_params: u64,
    pub non_encoder_flops: u64,
    pub non_encoder_params: u64,
    pub total_mflops: f64,
    pub total_params_m: f64,
    pub published: Option<PublishedTotals>,
}

impl ComplexityReport {
    pub fn non_encoder_mflops(&self) -> f64 {
        self.non_encoder_flops as f64 / 1e6
    }
}

/// Per-layer MAC counts for one caption of `seq_len` steps.
pub fn layer_costs(config: &ModelConfig, seq_len: usize) -> Result<Vec<LayerCost>> {
    let params = count_params(config)?;
    let c = config;
    let (d_a, n_a, d_h, d_e, v) = (
        c.feature_dim as u64,
        c.num_regions() as u64,
        c.hidden_dim as u64,
        c.attention_dim as u64,
        c.vocab_size as u64,
    );
    let t = seq_len as u64;
    let p = |prefix: &str| -> u64 {
        params
            .tensors
            .iter()
            .filter(|x| x.name == prefix || x.name.starts_with(&format!("{prefix}.")))
            .map(|x| x.count)
            .sum()
    };
    // Three gate products and bias adds, then σ, σ, r⊙h, tanh, 1−z,
    // two products and the final sum.
    let gru = |inp: u64| 3 * d_h * (inp + d_h) + if c.gru_bias { 3 * d_h } else { 0 } + 8 * d_h;
    let lin = |inp: u64, out: u64, bias: bool| inp * out + if bias { out } else { 0 };
    use Component::*;
    let layer = |name: &str, component, params, flops, invocations| LayerCost {
        name: name.to_string(),
        component,
        params,
        flops_per_invocation: flops,
        invocations,
    };
    let mut layers = vec![
        layer("mean_pool", Attention, 0, d_a * n_a, 1),
        // A column bias is tiled by an outer product with ones, then added.
        layer(
            "att.feature",
            Attention,
            p("att.feature"),
            d_e * d_a * n_a + if c.attention_bias { 2 * d_e * n_a } else { 0 },
            1,
        ),
        layer("gru_att", Attention, p("gru_att"), gru(c.attention_input_dim() as u64), t),
        layer("att.hidden", Attention, p("att.hidden"), lin(d_h, d_e, c.attention_bias), t),
        layer("att.bilinear", Attention, p("att.omega"), 2 * d_e * n_a, t),
        layer("att.softmax", Attention, 0, 2 * n_a, t),
        layer("att.weighted_sum", Attention, 0, d_a * n_a, t),
        layer("gru_lang", Decoder, p("gru_lang"), gru(d_a), t),
        layer("output", Decoder, p("output"), lin(d_h, v, c.output_bias), t),
        layer("output.softmax", Decoder, 0, 2 * v, t),
    ];
    if c.wiring == Wiring::ButdStyle {
        layers.push(layer("embed", Decoder, p("embed"), 0, t));
    }
    Ok(layers)
}

pub fn count_flops(
    config: &ModelConfig,
    seq_len: usize,
    convention: Convention,
    encoder: &EncoderChoice,
) -> Result<ComplexityReport> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    let params = count_params(config)?;
    let f = convention.factor();
    let mut layers = layer_costs(config, seq_len)?;
    for l in &mut layers {
        l.flops_per_invocation *= f;
    }
    let flops = |comp| {
        layers
            .iter()
            .filter(|l| l.component == comp)
            .map(LayerCost::flops)
            .sum::<u64>()
    };
    let (attention_flops, decoder_flops) = (flops(Component::Attention), flops(Component::Decoder));
    let (name, encoder_mflops, encoder_params_m, published) = match encoder {
        EncoderChoice::Published(e) => (
            e.name.to_string(),
            e.mflops * f as f64,
            e.params_m,
            Some(PublishedTotals {
                mflops: e.published_total_mflops,
                params_m: e.published_total_params_m,
            }),
        ),
        EncoderChoice::TinyCnn(cnn) => {
            let (fl, pa) = tiny_cnn_cost(cnn);
            ("tiny-cnn".to_string(), (fl * f) as f64 / 1e6, pa as f64 / 1e6, None)
        }
        EncoderChoice::None => ("none".to_string(), 0.0, 0.0, None),
    };
    let non_encoder_flops = attention_flops + decoder_flops;
    Ok(ComplexityReport {
        convention,
        seq_len,
        encoder: name,
        encoder_mflops,
        encoder_params_m,
        attention_flops,
        attention_params: params.attention,
        decoder_flops,
        decoder_params: params.decoder,
        non_encoder_flops,
        non_encoder_params: params.total,
        total_mflops: encoder_mflops + non_encoder_flops as f64 / 1e6,
        total_params_m: encoder_params_m + params.total as f64 / 1e6,
        published,
        layers,
    })
}

/// Reports for every published encoder with the same decoder configuration.
pub fn encoder_sweep(config: &ModelConfig, seq_len: usize, convention: Convention) -> Result<Vec<ComplexityReport>> {
    ENCODERS
        .iter()
        .map(|e| count_flops(config, seq_len, convention, &EncoderChoice::Published(e)))
        .collect()
}

pub const GAP_NOTE: &str = "Non-encoder costs are derived from the implemented layers. \
The published totals imply a constant ≈796.6 MFLOPs and ≈22.15M parameters beyond the encoder, \
which these layers do not reproduce; the difference presumably comes from components whose \
extents are not stated. Totals are reported side by side, not reconciled.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Json,
}

pub fn render_table(reports: &[ComplexityReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to render".into()));
    }
    match format {
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(&serde_json::json!({
                "reports": reports,
                "note": GAP_NOTE,
            }))?;
            s.push('\n');
            Ok(s)
        }
        TableFormat::Markdown => {
            let r0 = &reports[0];
            let mut s = format!(
                "FLOPs convention: {}, sequence length {}\n\n\
                 | Encoder | Encoder MFLOPs | Non-encoder MFLOPs | Total MFLOPs | Published MFLOPs | Encoder params (M) | Non-encoder params (M) | Total params (M) | Published params (M) |\n\
                 |---|---:|---:|---:|---:|---:|---:|---:|---:|\n",
                r0.convention, r0.seq_len
            );
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            for r in reports {
                s.push_str(&format!(
                    "| {} | {:.3} | {:.6} | {:.3} | {} | {:.2} | {:.6} | {:.3} | {} |\n",
                    r.encoder,
                    r.encoder_mflops,
                    r.non_encoder_mflops(),
                    r.total_mflops,
                    opt(r.published.as_ref().map(|p| p.mflops)),
                    r.encoder_params_m,
                    r.non_encoder_params as f64 / 1e6,
                    r.total_params_m,
                    opt(r.published.as_ref().map(|p| p.params_m)),
                ));
            }
            s.push_str(&format!(
                "\nAttention: {} params, {} FLOPs per caption. Decoder: {} params, {} FLOPs per caption.\n\n{GAP_NOTE}\n",
                r0.attention_params, r0.attention_flops, r0.decoder_params, r0.decoder_flops
            ));
            Ok(s)
        }
    }
}

/// Parameter count of an instantiated model's store, for cross-checking
/// `count_params`.
pub fn instantiated_params(config: &ModelConfig) -> Result<u64> {
    let model = AcLite::new(config.clone())?;
    Ok(model.init_params(0).num_scalars() as u64)
}
