//! Command-line entry point: `aclite <command> [flags]`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::AdamState;
use crate::complexity::{count_flops, encoder_sweep, render_table, Component, Convention, EncoderChoice, TableFormat};
use crate::data::{
    generate_toy_corpus, resolve, tokenize, DatasetManifest, Split, ToyConfig, Vocabulary, DEFAULT_MIN_OCCURRENCES,
    MAX_CAPTION_LEN,
};
use crate::decoding::{beam_prepared, greedy_prepared};
use crate::error::{Error, Result};
use crate::metrics::{EvalItem, EvalReport};
use crate::model::{AcLite, ModelConfig};
use crate::selftest;
use crate::training::{load_checkpoint, train_scst, train_xe, Checkpoint, CheckpointMeta, CiderReward, TrainConfig, TrainSet};
use crate::vision::{FeatureProvider, FeatureSource};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 6,
            max_len: MAX_CAPTION_LEN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn published() -> Self {
        RunConfig {
            model: ModelConfig::published(),
            ..Default::default()
        }
    }

    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ..Default::default()
        }
    }

    /// Overlays the JSON document `overlay` on `base`, object by object.
    pub fn merged(base: &RunConfig, overlay: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(overlay)?;
        if !overlay.is_object() {
            return Err(Error::Config("run configuration must be a JSON object".into()));
        }
        let mut value = serde_json::to_value(base)?;
        merge(&mut value, overlay);
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, desk: bool) -> Result<Self> {
        let base = if desk { Self::desk() } else { Self::published() };
        let cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::merged(&base, &text)?
            }
            None => base,
        };
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Parser, Debug)]
#[command(name = "aclite", version, about = "Lightweight attention captioner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary from a manifest split.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep tokens seen more than this many times.
        #[arg(long, default_value_t = DEFAULT_MIN_OCCURRENCES)]
        min_count: usize,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Write the synthetic captioning corpus.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_images: Option<usize>,
    },
    Train(TrainArgs),
    /// Caption every image of a split.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Run configuration supplying `decode` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Beam width; defaults to `decode.beam_size` (6).
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a hypotheses file against manifest references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Tab-separated `image_id<TAB>caption` lines.
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Parameter and FLOP accounting.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value = "mac")]
        convention: Convention,
        /// Encoder name, `all`, or `none`.
        #[arg(long, default_value = "all")]
        encoder: String,
        #[arg(long, default_value_t = MAX_CAPTION_LEN)]
        seq_len: usize,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference and oracle checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Xe,
    Scst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Markdown,
    Json,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Mode::Xe)]
    pub mode: Mode,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub desk: bool,
    /// Start from these parameters with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a run, restoring optimizer state and epoch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// 2 configuration, 3 data or format, 4 numeric or self-test failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Lookup(_) => 2,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Encoding(_)
        | Error::Vocabulary(_)
        | Error::Dimension(_) => 3,
        Error::NumericDomain(_) | Error::Autodiff(_) | Error::Optimizer(_) | Error::Metric(_) | Error::Reward(_) => 4,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::BuildVocab {
            manifest,
            out,
            min_count,
            split,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let caps = m.tokenized_captions(split);
            let vocab = Vocabulary::build(caps.iter(), min_count);
            vocab.save(&out)?;
            info!("{} tokens from {} {split} captions", vocab.len(), caps.len());
        }
        Command::GenToy {
            out,
            config,
            seed,
            n_images,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => ToyConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.n_images = n_images.unwrap_or(cfg.n_images);
            let corpus = generate_toy_corpus(&cfg)?;
            corpus.write(&out)?;
            info!("wrote {} images to {}", corpus.maps.len(), out.display());
        }
        Command::Train(args) => train(args)?,
        Command::Caption {
            checkpoint,
            manifest,
            vocab,
            split,
            config,
            beam,
            greedy,
            max_len,
            out,
        } => {
            let decode = RunConfig::load(config.as_deref(), false)?.decode;
            let beam = if greedy {
                None
            } else {
                Some(beam.unwrap_or(decode.beam_size))
            };
            let max_len = max_len.unwrap_or(decode.max_len);
            let text = caption(&checkpoint, &manifest, &vocab, split, beam, max_len)?;
            write_output(out.as_deref(), &text)?;
        }
        Command::Evaluate {
            manifest,
            hypotheses,
            split,
            out,
            beam_size,
            checkpoint,
        } => {
            let report = evaluate(&manifest, &hypotheses, split, beam_size, checkpoint)?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            write_output(out.as_deref(), &json)?;
            info!(
                "BLEU-4 {:.2}, CIDEr-D {:.2} over {} images",
                report.bleu[3], report.cider, report.n_images
            );
        }
        Command::Profile {
            config,
            desk,
            convention,
            encoder,
            seq_len,
            format,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref(), desk)?;
            let text = profile(&cfg.model, convention, &encoder, seq_len, format)?;
            write_output(out.as_deref(), &text)?;
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let mut text = String::new();
            for r in &results {
                text.push_str(&format!(
                    "{} {}: {}\n",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                ));
            }
            write_output(None, &text)?;
            if results.iter().any(|r| !r.passed) {
                return Ok(4);
            }
        }
    }
    Ok(0)
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required (or data.{name} in the run configuration)")))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref(), args.desk)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.train.validate()?;
    let manifest_path = required(args.manifest, &cfg.data.manifest, "manifest")?;
    let vocab_path = required(args.vocab, &cfg.data.vocab, "vocab")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    cfg.model.vocab_size = vocab.len();
    let model = AcLite::new(cfg.model.clone())?;
    let provider = FeatureProvider::File {
        channels: cfg.model.feature_dim,
        height: cfg.model.grid_height,
        width: cfg.model.grid_width,
    };
    let data = TrainSet::from_manifest(&manifest, &manifest_path, &vocab, &provider, Split::Train, cfg.train.max_len)?;
    info!(
        "{} images, {} captions, |V| = {}",
        data.image_ids.len(),
        data.examples.len(),
        vocab.len()
    );

    let (mut params, mut adam, start) = if let Some(path) = &args.resume {
        let ck = Checkpoint::load(path)?;
        if ck.meta.model != cfg.model {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        let mut adam = ck.adam;
        adam.config = cfg.train.adam();
        (ck.params, adam, ck.meta.epoch)
    } else if let Some(path) = &args.init {
        (load_checkpoint(path)?, AdamState::new(cfg.train.adam()), 0)
    } else {
        (model.init_params(cfg.train.seed), AdamState::new(cfg.train.adam()), 0)
    };
    model.check_params(&params)?;

    match args.mode {
        Mode::Xe => {
            train_xe(&model, &mut params, &mut adam, &data, &cfg.train, start, |log| {
                info!(
                    "epoch {} loss {:.4} token accuracy {:.4} lr {:.2e}",
                    log.epoch, log.loss, log.token_accuracy, log.learning_rate
                )
            })?;
        }
        Mode::Scst => {
            let reward = CiderReward::new(data.references.clone())?;
            train_scst(&model, &mut params, &mut adam, &data, &reward, &cfg.train, start, |log| {
                info!(
                    "epoch {} sample reward {:.4} greedy reward {:.4}",
                    log.epoch, log.sample_reward, log.greedy_reward
                )
            })?;
        }
    }
    let ck = Checkpoint {
        meta: CheckpointMeta {
            model: cfg.model,
            epoch: cfg.train.epochs.max(start),
            seed: cfg.train.seed,
            adam_step: adam.step_count(),
            train: cfg.train,
        },
        params,
        adam,
    };
    ck.save(&args.out)?;
    info!("saved {}", args.out.display());
    Ok(())
}

/// One `image_id<TAB>caption` line per image; `beam = None` decodes
/// greedily.
pub fn caption(
    checkpoint: &Path,
    manifest_path: &Path,
    vocab_path: &Path,
    split: Split,
    beam: Option<usize>,
    max_len: usize,
) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    if vocab.len() != ck.meta.model.vocab_size {
        return Err(Error::Vocabulary(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            ck.meta.model.vocab_size
        )));
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    let model = AcLite::new(ck.meta.model.clone())?;
    model.check_params(&ck.params)?;
    let c = &ck.meta.model;
    let provider = FeatureProvider::File {
        channels: c.feature_dim,
        height: c.grid_height,
        width: c.grid_width,
    };
    let mut out = String::new();
    for img in manifest.split(split) {
        let rel = img
            .features
            .as_deref()
            .ok_or_else(|| Error::Data(format!("image {:?} has no feature file", img.id)))?;
        let feats = provider.features(FeatureSource::File(&resolve(manifest_path, rel)))?;
        let prepared = model.prepare(&ck.params, &feats)?;
        let tokens = match beam {
            Some(k) => {
                beam_prepared(&model, &ck.params, &prepared, k, max_len)?
                    .swap_remove(0)
                    .tokens
            }
            None => greedy_prepared(&model, &ck.params, &prepared, max_len)?,
        };
        out.push_str(&format!("{}\t{}\n", img.id, vocab.decode(&tokens)?));
    }
    Ok(out)
}

pub fn evaluate(
    manifest_path: &Path,
    hypotheses: &Path,
    split: Split,
    beam_size: Option<usize>,
    checkpoint: Option<String>,
) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let text = fs::read_to_string(hypotheses).map_err(|e| Error::io(hypotheses, e))?;
    let mut hyps: BTreeMap<&str, &str> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let (id, cap) = line.split_once('\t').unwrap_or((line, ""));
        if hyps.insert(id, cap).is_some() {
            return Err(Error::Data(format!("line {}: duplicate hypothesis for {id:?}", n + 1)));
        }
    }
    let mut corpus = Vec::new();
    for img in manifest.split(split) {
        let hyp = hyps
            .remove(img.id.as_str())
            .ok_or_else(|| Error::Data(format!("no hypothesis for image {:?}", img.id)))?;
        corpus.push(EvalItem {
            hypothesis: tokenize(hyp),
            references: img.captions.iter().map(|c| tokenize(c)).collect(),
        });
    }
    if let Some(id) = hyps.keys().next() {
        return Err(Error::Data(format!(
            "hypothesis for {id:?}, which is not in the {split} split"
        )));
    }
    EvalReport::compute(&corpus, beam_size, checkpoint)
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn profile(model: &ModelConfig, convention: Convention, encoder: &str, seq_len: usize, format: Format) -> Result<String> {
    let reports = match encoder.to_ascii_lowercase().as_str() {
        "all" => encoder_sweep(model, seq_len, convention)?,
        "none" => vec![count_flops(model, seq_len, convention, &EncoderChoice::None)?],
        name => vec![count_flops(model, seq_len, convention, &EncoderChoice::named(name)?)?],
    };
    match format {
        Format::Json => render_table(&reports, TableFormat::Json),
        Format::Markdown => {
            let mut s = render_table(&reports, TableFormat::Markdown)?;
            s.push_str("\n| Layer | Component | Params | FLOPs per call | Calls |\n|---|---|---:|---:|---:|\n");
            for l in &reports[0].layers {
                let comp = match l.component {
                    Component::Attention => "attention",
                    Component::Decoder => "decoder",
                };
                s.push_str(&format!(
                    "| {} | {comp} | {} | {} | {} |\n",
                    l.name,
                    grouped(l.params),
                    grouped(l.flops_per_invocation),
                    l.invocations
                ));
            }
            Ok(s)
        }
    }
}
