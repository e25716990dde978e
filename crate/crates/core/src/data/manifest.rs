use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::tokenize::tokenize;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    pub split: Split,
    pub features: Option<String>,
    pub image: Option<String>,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
}

/// One caption paired with its image, ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub split: Split,
    pub raw: String,
    pub ids: Vec<usize>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Data(format!("duplicate image id {:?}", img.id)));
            }
            if img.features.is_none() && img.image.is_none() {
                return Err(Error::Data(format!("image {:?} has neither features nor image path", img.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Tokenized captions of one split, for vocabulary building.
    pub fn tokenized_captions(&self, split: Split) -> Vec<Vec<String>> {
        self.split(split)
            .flat_map(|i| i.captions.iter().map(|c| tokenize(c)))
            .collect()
    }

    pub fn records(&self, vocab: &Vocabulary, max_len: usize) -> Vec<CaptionRecord> {
        self.images
            .iter()
            .flat_map(|img| {
                img.captions.iter().map(move |c| {
                    let raw: String = c.nfc().collect();
                    let ids = vocab.encode(&tokenize(&raw), max_len);
                    CaptionRecord {
                        image_id: img.id.clone(),
                        split: img.split,
                        raw,
                        ids,
                    }
                })
            })
            .collect()
    }
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS, EOS, UNK};

    fn sample() -> DatasetManifest {
        DatasetManifest {
            images: vec![
                ImageEntry {
                    id: "img0".into(),
                    split: Split::Train,
                    features: Some("features/img0.aclf".into()),
                    image: None,
                    captions: vec!["a red circle.".into()],
                },
                ImageEntry {
                    id: "img1".into(),
                    split: Split::Test,
                    features: None,
                    image: Some("images/img1.ppm".into()),
                    captions: vec!["a blue square".into(), "blue square".into()],
                },
            ],
        }
    }

    #[test]
    fn golden_manifest_json() {
        let expected = r#"{
  "images": [
    {
      "id": "img0",
      "split": "train",
      "features": "features/img0.aclf",
      "image": null,
      "captions": [
        "a red circle."
      ]
    },
    {
      "id": "img1",
      "split": "test",
      "features": null,
      "image": "images/img1.ppm",
      "captions": [
        "a blue square",
        "blue square"
      ]
    }
  ]
}
"#;
        assert_eq!(sample().to_json(), expected);
        assert_eq!(DatasetManifest::from_json(expected).unwrap(), sample());
    }

    #[test]
    fn rejects_duplicates_unknown_keys_and_bad_split() {
        let mut m = sample();
        m.images[1].id = "img0".into();
        assert!(matches!(m.validate(), Err(Error::Data(_))));
        let extra = r#"{"images":[],"extra":1}"#;
        assert!(DatasetManifest::from_json(extra).is_err());
        let bad = r#"{"images":[{"id":"a","split":"dev","features":"x","image":null,"captions":[]}]}"#;
        assert!(DatasetManifest::from_json(bad).is_err());
    }

    #[test]
    fn records_encode_every_caption() {
        let m = sample();
        let vocab = Vocabulary::build(&m.tokenized_captions(Split::Train), 0);
        let recs = m.records(&vocab, 16);
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs[0].ids,
            vec![BOS, vocab.id("a"), vocab.id("red"), vocab.id("circle"), EOS]
        );
        assert_eq!(recs[1].ids[2..4], [UNK, UNK]);
        assert!(recs.iter().all(|r| r.ids.iter().all(|&i| i < vocab.len())));
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let p = resolve(Path::new("/data/set/manifest.json"), "features/a.aclf");
        assert_eq!(p, Path::new("/data/set/features/a.aclf"));
        assert_eq!(resolve(Path::new("/x/m.json"), "/abs/f"), Path::new("/abs/f"));
    }
}
