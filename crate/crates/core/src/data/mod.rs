//! Caption text handling, vocabularies, manifests and the synthetic corpus.

mod manifest;
mod tokenize;
mod toy;
mod vocab;

pub use manifest::{resolve, CaptionRecord, DatasetManifest, ImageEntry, Split};
pub use tokenize::{is_punctuation, tokenize, tokenize_bytes, EXTRA_PUNCTUATION};
pub use toy::{generate_toy_corpus, Grammar, Slot, ToyConfig, ToyCorpus};
pub use vocab::{Vocabulary, BOS, DEFAULT_MIN_OCCURRENCES, EOS, MAX_CAPTION_LEN, PAD, RESERVED, UNK, UNK_TOKEN};
