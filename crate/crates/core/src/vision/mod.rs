//! Visual feature maps, adaptive pooling, flattening and feature providers.

mod cnn;
mod io;

use std::path::Path;

pub use cnn::{Image, TinyCnn};
pub use io::{decode_features, encode_features, load_features, save_features, FEATURE_MAGIC, FEATURE_VERSION};

use crate::autodiff::{ModelParams, Tensor};
use crate::error::{Error, Result};

/// Encoder output of shape `channels × height × width`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "feature map extents must be positive, got {channels}×{height}×{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::dim(format!(
                "feature map {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Start of adaptive bin `i` when splitting `len` cells into `bins` bins.
fn bin_start(i: usize, len: usize, bins: usize) -> usize {
    i * len / bins
}

/// Average pooling over near-equal rectangular bins so the output is exactly
/// `target_h × target_w`. Bin `i` along an axis of length `L` split into `t`
/// bins covers `⌊iL/t⌋ .. ⌊(i+1)L/t⌋`.
pub fn adaptive_pool(map: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h == 0 || target_w == 0 || target_h > map.height || target_w > map.width {
        return Err(Error::dim(format!(
            "cannot pool {}×{} down to {target_h}×{target_w}",
            map.height, map.width
        )));
    }
    let mut out = Vec::with_capacity(map.channels * target_h * target_w);
    for c in 0..map.channels {
        for by in 0..target_h {
            let (y0, y1) = (bin_start(by, map.height, target_h), bin_start(by + 1, map.height, target_h));
            for bx in 0..target_w {
                let (x0, x1) = (bin_start(bx, map.width, target_w), bin_start(bx + 1, map.width, target_w));
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += map.at(c, y, x);
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    FeatureMap::new(map.channels, target_h, target_w, out)
}

/// Region feature matrix `A: [d_a × n_a]` and its column mean `ā`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    regions: Tensor,
    mean_pooled: Tensor,
}

impl VisualFeatures {
    /// Builds features from a `d_a × n_a` matrix (columns are regions).
    pub fn from_matrix(regions: Tensor) -> Result<Self> {
        let (d, n) = match regions.shape() {
            [d, n] => (*d, *n),
            s => return Err(Error::dim(format!("region matrix must be rank 2, got {s:?}"))),
        };
        let data = regions.data();
        let mean: Vec<f64> = (0..d)
            .map(|i| data[i * n..(i + 1) * n].iter().fold(0.0, |a, b| a + b) / n as f64)
            .collect();
        Ok(VisualFeatures {
            mean_pooled: Tensor::vector(mean)?,
            regions,
        })
    }

    pub fn regions(&self) -> &Tensor {
        &self.regions
    }

    pub fn mean_pooled(&self) -> &Tensor {
        &self.mean_pooled
    }

    pub fn feature_dim(&self) -> usize {
        self.regions.shape()[0]
    }

    pub fn num_regions(&self) -> usize {
        self.regions.shape()[1]
    }

    /// Region vector `a_i`.
    pub fn region(&self, i: usize) -> Vec<f64> {
        let n = self.num_regions();
        (0..self.feature_dim()).map(|c| self.regions.data()[c * n + i]).collect()
    }
}

/// Column `i` of `A` is the channel fiber at spatial position `i`, row-major
/// over height then width. A channel-major map is already that matrix.
pub fn flatten(map: &FeatureMap) -> VisualFeatures {
    let regions =
        Tensor::matrix(map.channels, map.height * map.width, map.values.clone()).expect("feature map extents are valid");
    VisualFeatures::from_matrix(regions).expect("rank-2 matrix")
}

/// Where a provider reads an image's features from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    File(&'a Path),
    Image(&'a Image),
}

/// Produces feature maps with a fixed `(d_a, n_h, n_w)` geometry.
#[derive(Clone, Debug)]
pub enum FeatureProvider {
    /// Reads serialized maps and adaptively pools them to the target grid.
    File { channels: usize, height: usize, width: usize },
    /// Runs a small convolutional stack over raw images.
    TinyCnn { cnn: TinyCnn, params: ModelParams },
}

impl FeatureProvider {
    pub fn geometry(&self) -> (usize, usize, usize) {
        match self {
            FeatureProvider::File { channels, height, width } => (*channels, *height, *width),
            FeatureProvider::TinyCnn { cnn, .. } => (cnn.out_channels(), cnn.out_height(), cnn.out_width()),
        }
    }

    pub fn feature_map(&self, source: FeatureSource<'_>) -> Result<FeatureMap> {
        let (channels, height, width) = self.geometry();
        let map = match (self, source) {
            (FeatureProvider::File { .. }, FeatureSource::File(path)) => {
                let map = load_features(path)?;
                if map.channels() != channels {
                    return Err(Error::dim(format!(
                        "{} has {} channels, expected {channels}",
                        path.display(),
                        map.channels()
                    )));
                }
                if (map.height(), map.width()) == (height, width) {
                    map
                } else {
                    adaptive_pool(&map, height, width)?
                }
            }
            (FeatureProvider::TinyCnn { cnn, params }, FeatureSource::Image(img)) => cnn.forward(params, img)?,
            _ => return Err(Error::Config("feature source does not match provider kind".into())),
        };
        Ok(map)
    }

    pub fn features(&self, source: FeatureSource<'_>) -> Result<VisualFeatures> {
        Ok(flatten(&self.feature_map(source)?))
    }
}
