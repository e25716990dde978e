use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const UNK_TOKEN: &str = "<unk>";
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", UNK_TOKEN];

/// Default interior caption length.
pub const MAX_CAPTION_LEN: usize = 16;
/// Tokens must occur more than this many times to enter the vocabulary.
pub const DEFAULT_MIN_OCCURRENCES: usize = 5;

/// Bidirectional token ↔ id map. Ids 0..4 are the reserved tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frequencies: BTreeMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, frequencies: BTreeMap<String, usize>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            frequencies,
        })
    }

    /// Keeps tokens occurring more than `min_occurrences` times, ordered by
    /// descending count with ties broken by code-point order, after the
    /// reserved tokens.
    pub fn build<'a, I, C>(captions: I, min_occurrences: usize) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = &'a String>,
    {
        let mut frequencies: BTreeMap<String, usize> = BTreeMap::new();
        for caption in captions {
            for tok in caption {
                *frequencies.entry(tok.clone()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&String, usize)> = frequencies
            .iter()
            .filter(|(t, &c)| c > min_occurrences && !RESERVED.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Self::from_tokens(tokens, frequencies).expect("tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Build-time counts of every token seen, kept or not.
    pub fn frequencies(&self) -> &BTreeMap<String, usize> {
        &self.frequencies
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("id {id} out of range for vocabulary of size {}", self.len())))
    }

    /// `[BOS, ids of the first max_len tokens, EOS]`; unknown tokens map to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len().min(max_len) + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().take(max_len).map(|t| self.id(t.as_ref())));
        ids.push(EOS);
        ids
    }

    /// Space-joined text of `ids`, skipping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            if !matches!(id, PAD | BOS | EOS) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Vocabulary(format!("line {} must be the reserved token {r}", i + 1)));
            }
        }
        if let Some(bad) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::Vocabulary(format!("invalid vocabulary entry {bad:?}")));
        }
        Self::from_tokens(tokens, BTreeMap::new())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Encoding(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}
