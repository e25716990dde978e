use super::ngram::{ngrams, MAX_N};
use super::{check_corpus, EvalItem};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuOptions {
    pub n_max: usize,
    /// Adds one to every clipped-match count and total before taking
    /// precisions, so corpora without 4-gram hits score above zero.
    pub add_one_smoothing: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            n_max: MAX_N,
            add_one_smoothing: false,
        }
    }
}

/// Corpus BLEU-1..n on the 0–100 scale. Hypothesis n-gram counts are clipped
/// by the maximum count across that image's references; the reference length
/// per image is the one closest to the hypothesis length (shorter on ties).
pub fn bleu<T: Ord + Clone>(corpus: &[EvalItem<T>], options: BleuOptions) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    let n_max = options.n_max;
    let mut matches = vec![0usize; n_max];
    let mut totals = vec![0usize; n_max];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for item in corpus {
        let c = item.hypothesis.len();
        hyp_len += c;
        ref_len += item
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("references checked nonempty");
        for n in 1..=n_max {
            let hyp = ngrams(&item.hypothesis, n);
            let refs: Vec<_> = item.references.iter().map(|r| ngrams(r, n)).collect();
            for (g, &count) in &hyp {
                let cap = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matches[n - 1] += count.min(cap);
                totals[n - 1] += count;
            }
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let extra = if options.add_one_smoothing { 1.0 } else { 0.0 };
    let mut log_sum = 0.0;
    let mut scores = Vec::with_capacity(n_max);
    for n in 0..n_max {
        let num = matches[n] as f64 + extra;
        let den = totals[n] as f64 + extra;
        let p = if den > 0.0 { num / den } else { 0.0 };
        log_sum += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let geo = (log_sum / (n + 1) as f64).exp();
        scores.push(100.0 * bp * geo);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::error::Error;

    fn item(h: &str, refs: &[&str]) -> EvalItem<String> {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        EvalItem {
            hypothesis: split(h),
            references: refs.iter().map(|r| split(r)).collect(),
        }
    }

    #[test]
    fn identity_scores_one_hundred() {
        let c = [item("a man rides a horse", &["a man rides a horse"])];
        for s in bleu(&c, BleuOptions::default()).unwrap() {
            assert!((s - 100.0).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn clipping_case() {
        let c = [item("a a a a", &["a b"])];
        let s = bleu(&c, BleuOptions::default()).unwrap();
        assert!((s[0] - 25.0).abs() < 1e-9, "{}", s[0]);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        // c = 2, references of length 3 and 6: r = 3, BP = e^{1 - 3/2}.
        let c = [item("a b", &["a b c", "a b c d e f"])];
        let s = bleu(&c, BleuOptions::default()).unwrap();
        assert!((s[0] - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
        // Tie between lengths 1 and 3 for c = 2 picks the shorter.
        let c = [item("a b", &["a", "a b c"])];
        assert!((bleu(&c, BleuOptions::default()).unwrap()[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn smoothing_lifts_missing_four_grams() {
        let c = [item("a b c d", &["a b c e"])];
        assert_eq!(bleu(&c, BleuOptions::default()).unwrap()[3], 0.0);
        let smooth = BleuOptions {
            add_one_smoothing: true,
            ..BleuOptions::default()
        };
        // p = 4/5, 3/4, 2/3, 1/2 after adding one.
        let want = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&c, smooth).unwrap()[3] - want).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_and_references_are_errors() {
        assert!(matches!(bleu::<String>(&[], BleuOptions::default()), Err(Error::Metric(_))));
        let c = [EvalItem::<String> {
            hypothesis: vec![],
            references: vec![],
        }];
        assert!(matches!(bleu(&c, BleuOptions::default()), Err(Error::Metric(_))));
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<EvalItem<u8>>> {
        let seq = || proptest::collection::vec(0u8..5, 0..7);
        proptest::collection::vec(
            (seq(), proptest::collection::vec(seq(), 1..3))
                .prop_map(|(hypothesis, references)| EvalItem { hypothesis, references }),
            1..5,
        )
    }

    proptest! {
        #[test]
        fn bounded_and_order_invariant(corpus in corpus_strategy()) {
            let s = bleu(&corpus, BleuOptions::default()).unwrap();
            let mut rev = corpus.clone();
            rev.reverse();
            let r = bleu(&rev, BleuOptions::default()).unwrap();
            for (a, b) in s.iter().zip(&r) {
                prop_assert!(*a >= 0.0 && *a <= 100.0 + 1e-9);
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn duplicate_reference_changes_nothing(corpus in corpus_strategy()) {
            let mut dup = corpus.clone();
            for it in &mut dup {
                let first = it.references[0].clone();
                it.references.push(first);
            }
            prop_assert_eq!(bleu(&corpus, BleuOptions::default()).unwrap(), bleu(&dup, BleuOptions::default()).unwrap());
        }

        #[test]
        fn renaming_tokens_changes_nothing(corpus in corpus_strategy()) {
            let renamed: Vec<EvalItem<u8>> = corpus
                .iter()
                .map(|it| EvalItem {
                    hypothesis: it.hypothesis.iter().map(|t| 9 - t).collect(),
                    references: it.references.iter().map(|r| r.iter().map(|t| 9 - t).collect()).collect(),
                })
                .collect();
            prop_assert_eq!(bleu(&corpus, BleuOptions::default()).unwrap(), bleu(&renamed, BleuOptions::default()).unwrap());
        }
    }
}
