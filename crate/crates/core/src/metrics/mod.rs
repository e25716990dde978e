//! Caption metrics: corpus BLEU-1..4 and CIDEr-D.
//!
//! Everything is generic over the token type so the same code scores word
//! strings at evaluation time and token ids inside the SCST reward.

mod bleu;
mod cider;
mod ngram;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, BleuOptions};
pub use cider::{cider, CiderD, CIDER_SIGMA};
pub use ngram::{ngrams, NGramStats, MAX_N};

use crate::error::{Error, Result};

/// One image: a hypothesis and its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem<T> {
    pub hypothesis: Vec<T>,
    pub references: Vec<Vec<T>>,
}

pub(crate) fn check_corpus<T>(corpus: &[EvalItem<T>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Metric("evaluation corpus is empty".into()));
    }
    if let Some(i) = corpus.iter().position(|it| it.references.is_empty()) {
        return Err(Error::Metric(format!("image {i} has no references")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n_images: usize,
    pub bleu: [f64; 4],
    pub cider: f64,
    pub beam_size: Option<usize>,
    pub checkpoint: Option<String>,
}

impl EvalReport {
    pub fn compute<T: Ord + Clone>(corpus: &[EvalItem<T>], beam_size: Option<usize>, checkpoint: Option<String>) -> Result<Self> {
        let b = bleu(corpus, BleuOptions::default())?;
        Ok(EvalReport {
            n_images: corpus.len(),
            bleu: [b[0], b[1], b[2], b[3]],
            cider: cider(corpus)?,
            beam_size,
            checkpoint,
        })
    }
}
