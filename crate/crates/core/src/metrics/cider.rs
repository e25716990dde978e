use std::collections::{BTreeMap, BTreeSet};

use super::ngram::{NGramStats, MAX_N};
use super::{check_corpus, EvalItem};
use crate::error::{Error, Result};

/// Width of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D with document frequencies frozen from a reference corpus.
#[derive(Clone, Debug)]
pub struct CiderD<T> {
    document_frequency: BTreeMap<Vec<T>, usize>,
    log_num_images: f64,
    pub sigma: f64,
}

struct TfIdf<T> {
    orders: Vec<BTreeMap<Vec<T>, f64>>,
    norms: Vec<f64>,
    length: usize,
}

impl<T: Ord + Clone> CiderD<T> {
    /// `references[i]` holds every reference caption of image `i`. An
    /// n-gram's document frequency is the number of images whose references
    /// contain it.
    pub fn new(references: &[Vec<Vec<T>>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Metric("CIDEr-D needs at least one reference image".into()));
        }
        let mut document_frequency = BTreeMap::new();
        for refs in references {
            let mut seen = BTreeSet::new();
            for r in refs {
                for order in NGramStats::new(r, MAX_N).orders {
                    seen.extend(order.into_keys());
                }
            }
            for g in seen {
                *document_frequency.entry(g).or_insert(0) += 1;
            }
        }
        Ok(CiderD {
            document_frequency,
            log_num_images: (references.len() as f64).ln(),
            sigma: CIDER_SIGMA,
        })
    }

    fn vectorize(&self, tokens: &[T]) -> TfIdf<T> {
        let stats = NGramStats::new(tokens, MAX_N);
        let mut orders = Vec::with_capacity(MAX_N);
        let mut norms = Vec::with_capacity(MAX_N);
        for counts in stats.orders {
            let mut vec = BTreeMap::new();
            let mut sq = 0.0;
            for (g, tf) in counts {
                let df = self.document_frequency.get(&g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (self.log_num_images - df.ln());
                sq += w * w;
                vec.insert(g, w);
            }
            orders.push(vec);
            norms.push(sq.sqrt());
        }
        TfIdf {
            orders,
            norms,
            length: tokens.len(),
        }
    }

    fn similarity(&self, hyp: &TfIdf<T>, r: &TfIdf<T>) -> [f64; MAX_N] {
        let delta = hyp.length as f64 - r.length as f64;
        let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        let mut out = [0.0; MAX_N];
        #[allow(clippy::needless_range_loop)]
        for n in 0..MAX_N {
            let mut val = 0.0;
            for (g, &h) in &hyp.orders[n] {
                if let Some(&rv) = r.orders[n].get(g) {
                    val += h.min(rv) * rv;
                }
            }
            if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= hyp.norms[n] * r.norms[n];
            }
            out[n] = val * penalty;
        }
        out
    }

    /// Score of one hypothesis against its references, on the ×10 scale.
    pub fn score(&self, hypothesis: &[T], references: &[Vec<T>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::Metric("CIDEr-D needs at least one reference".into()));
        }
        let hyp = self.vectorize(hypothesis);
        let mut per_order = [0.0; MAX_N];
        for r in references {
            let sims = self.similarity(&hyp, &self.vectorize(r));
            for n in 0..MAX_N {
                per_order[n] += sims[n];
            }
        }
        let mean = per_order.iter().sum::<f64>() / MAX_N as f64;
        Ok(10.0 * mean / references.len() as f64)
    }

    pub fn corpus_score(&self, corpus: &[EvalItem<T>]) -> Result<f64> {
        check_corpus(corpus)?;
        let mut total = 0.0;
        for item in corpus {
            total += self.score(&item.hypothesis, &item.references)?;
        }
        Ok(total / corpus.len() as f64)
    }
}

/// CIDEr-D with document frequencies taken from the corpus's own references.
pub fn cider<T: Ord + Clone>(corpus: &[EvalItem<T>]) -> Result<f64> {
    check_corpus(corpus)?;
    let refs: Vec<Vec<Vec<T>>> = corpus.iter().map(|it| it.references.clone()).collect();
    CiderD::new(&refs)?.corpus_score(corpus)
}
