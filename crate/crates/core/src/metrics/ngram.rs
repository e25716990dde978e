use std::collections::BTreeMap;

pub const MAX_N: usize = 4;

/// Counts of every n-gram of each order `1..=n_max`; `orders[n - 1]` holds
/// the n-grams.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramStats<T> {
    pub orders: Vec<BTreeMap<Vec<T>, usize>>,
}

pub fn ngrams<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

impl<T: Ord + Clone> NGramStats<T> {
    pub fn new(tokens: &[T], n_max: usize) -> Self {
        NGramStats {
            orders: (1..=n_max).map(|n| ngrams(tokens, n)).collect(),
        }
    }

    pub fn order(&self, n: usize) -> &BTreeMap<Vec<T>, usize> {
        &self.orders[n - 1]
    }

    pub fn total(&self, n: usize) -> usize {
        self.order(n).values().sum()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn counts_small_case() {
        let s = NGramStats::new(&["a", "b", "a", "b"], 4);
        assert_eq!(s.order(1)[&vec!["a"]], 2);
        assert_eq!(s.order(2)[&vec!["a", "b"]], 2);
        assert_eq!(s.order(2)[&vec!["b", "a"]], 1);
        assert_eq!(s.total(4), 1);
    }

    proptest! {
        #[test]
        fn totals_match_window_count(tokens in proptest::collection::vec(0u8..4, 0..12)) {
            let s = NGramStats::new(&tokens, MAX_N);
            for n in 1..=MAX_N {
                prop_assert_eq!(s.total(n), (tokens.len() + 1).saturating_sub(n));
                prop_assert!(s.order(n).values().all(|&c| c > 0));
            }
        }
    }
}
