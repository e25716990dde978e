use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ImageEntry, Split};
use crate::error::{Error, Result};
use crate::vision::{save_features, FeatureMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

/// A caption template such as `"a <color> <shape> on <background>"` plus the
/// values each `<slot>` may take.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub template: String,
    pub slots: Vec<Slot>,
}

fn slot(name: &str, values: &[&str]) -> Slot {
    Slot {
        name: name.to_string(),
        values: values.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar {
            template: "a <color> <shape> on <background>".into(),
            slots: vec![
                slot("color", &["red", "green", "blue"]),
                slot("shape", &["circle", "square", "triangle"]),
                slot("background", &["grass", "sand"]),
            ],
        }
    }
}

impl Grammar {
    pub fn colors_and_shapes() -> Self {
        Grammar {
            template: "a <color> <shape>".into(),
            slots: vec![
                slot("color", &["red", "green", "blue"]),
                slot("shape", &["circle", "square", "triangle"]),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeMap::new();
        for (i, s) in self.slots.iter().enumerate() {
            if s.values.is_empty() {
                return Err(Error::Config(format!("grammar slot {:?} has no values", s.name)));
            }
            if names.insert(s.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("grammar slot {:?} declared twice", s.name)));
            }
        }
        for word in self.template.split_whitespace() {
            if let Some(name) = word.strip_prefix('<').and_then(|w| w.strip_suffix('>')) {
                if !names.contains_key(name) {
                    return Err(Error::Config(format!("template refers to undeclared slot <{name}>")));
                }
            }
        }
        Ok(())
    }

    pub fn num_combinations(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).product()
    }

    /// Fills the template; `choice[k]` indexes the values of slot `k`.
    pub fn render(&self, choice: &[usize]) -> String {
        self.template
            .split_whitespace()
            .map(|word| match word.strip_prefix('<').and_then(|w| w.strip_suffix('>')) {
                Some(name) => {
                    let k = self.slots.iter().position(|s| s.name == name).expect("validated");
                    self.slots[k].values[choice[k]].as_str()
                }
                None => word,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_images: usize,
    pub grammar: Grammar,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Half-width of the uniform per-value jitter added to every region.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 7,
            n_images: 90,
            grammar: Grammar::default(),
            channels: 64,
            height: 4,
            width: 4,
            noise: 0.05,
        }
    }
}

pub struct ToyCorpus {
    pub manifest: DatasetManifest,
    pub maps: Vec<FeatureMap>,
    /// Slot choices behind each image's caption.
    pub choices: Vec<Vec<usize>>,
}

fn split_of(i: usize) -> Split {
    match i % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

/// Regions are assigned round-robin to slots; each region holds the
/// prototype of its slot's chosen value plus jitter, so the caption is a
/// function of the features. Values are rounded through f32 so the in-memory
/// maps equal what the feature files store.
pub fn generate_toy_corpus(config: &ToyConfig) -> Result<ToyCorpus> {
    let g = &config.grammar;
    g.validate()?;
    if config.channels == 0 || config.height == 0 || config.width == 0 {
        return Err(Error::Config("toy feature extents must be positive".into()));
    }
    if g.slots.is_empty() {
        return Err(Error::Config("toy grammar needs at least one slot".into()));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70_7e_57);
    let prototypes: Vec<Vec<Vec<f64>>> = g
        .slots
        .iter()
        .map(|s| {
            s.values
                .iter()
                .map(|_| (0..config.channels).map(|_| proto_rng.gen_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let regions = config.height * config.width;
    let mut images = Vec::with_capacity(config.n_images);
    let mut maps = Vec::with_capacity(config.n_images);
    let mut choices = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let choice: Vec<usize> = g.slots.iter().map(|s| rng.gen_range(0..s.values.len())).collect();
        // Channel-major [C, H, W] layout.
        let mut values = vec![0.0; config.channels * regions];
        for r in 0..regions {
            let k = r % g.slots.len();
            let proto = &prototypes[k][choice[k]];
            for c in 0..config.channels {
                let jitter = if config.noise > 0.0 {
                    rng.gen_range(-config.noise..config.noise)
                } else {
                    0.0
                };
                values[c * regions + r] = (proto[c] + jitter) as f32 as f64;
            }
        }
        let id = format!("toy_{i:04}");
        images.push(ImageEntry {
            features: Some(format!("features/{id}.aclf")),
            id,
            split: split_of(i),
            image: None,
            captions: vec![g.render(&choice)],
        });
        maps.push(FeatureMap::new(config.channels, config.height, config.width, values)?);
        choices.push(choice);
    }
    Ok(ToyCorpus {
        manifest: DatasetManifest { images },
        maps,
        choices,
    })
}

impl ToyCorpus {
    /// Writes `manifest.json` and `features/*.aclf` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for (img, map) in self.manifest.images.iter().zip(&self.maps) {
            let rel = img.features.as_deref().expect("toy images carry features");
            save_features(map, &dir.join(rel))?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }
}
