use rand::Rng;

use super::FeatureMap;
use crate::autodiff::{xavier_uniform, ModelParams, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// RGB image, `height × width × 3` row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "image {height}×{width}×3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::NumericDomain("image values must lie in [0, 1]".into()));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels reordered channel-major (`3 × H × W`).
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.pixels[(y * w + x) * 3 + c];
                }
            }
        }
        out
    }
}

/// Stack of `3×3`, stride-2, padding-1 convolutions with `tanh` between
/// them. Each layer halves the spatial extents.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyCnn {
    channels: Vec<usize>,
    input_height: usize,
    input_width: usize,
}

impl TinyCnn {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    /// `hidden` lists the intermediate widths; the last layer emits
    /// `out_channels`.
    pub fn new(hidden: &[usize], out_channels: usize, input_height: usize, input_width: usize) -> Result<Self> {
        let mut channels = vec![3];
        channels.extend_from_slice(hidden);
        channels.push(out_channels);
        if channels.contains(&0) {
            return Err(Error::Config("convolution widths must be positive".into()));
        }
        let cnn = TinyCnn {
            channels,
            input_height,
            input_width,
        };
        let stride_product = 1usize << cnn.num_layers();
        if !input_height.is_multiple_of(stride_product) || !input_width.is_multiple_of(stride_product) {
            return Err(Error::dim(format!(
                "input {input_height}×{input_width} is not divisible by the stride product {stride_product}"
            )));
        }
        Ok(cnn)
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one layer")
    }

    pub fn out_height(&self) -> usize {
        self.input_height >> self.num_layers()
    }

    pub fn out_width(&self) -> usize {
        self.input_width >> self.num_layers()
    }

    pub fn layer_channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn input_extents(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }

    pub fn weight_name(layer: usize) -> String {
        format!("cnn.conv{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("cnn.conv{layer}.bias")
    }

    pub fn num_params(&self) -> usize {
        self.channels
            .windows(2)
            .map(|w| w[1] * w[0] * Self::KERNEL * Self::KERNEL + w[1])
            .sum()
    }

    pub fn init<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) {
        let k2 = Self::KERNEL * Self::KERNEL;
        for (l, w) in self.channels.windows(2).enumerate() {
            let (cin, cout) = (w[0], w[1]);
            params.insert(
                Self::weight_name(l),
                xavier_uniform(rng, vec![cout, cin, Self::KERNEL, Self::KERNEL], cin * k2, cout * k2),
            );
            params.insert(Self::bias_name(l), Tensor::zeros(vec![cout]).expect("positive extent"));
        }
    }

    /// Records the forward pass on `tape`, returning a `[d_a × h × w]` node.
    pub fn forward_on(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let expect = [3, self.input_height, self.input_width];
        if tape.shape(image) != expect {
            return Err(Error::dim(format!(
                "tiny CNN expects input {expect:?}, got {:?}",
                tape.shape(image)
            )));
        }
        let mut x = image;
        for l in 0..self.num_layers() {
            let k = tape.param(&Self::weight_name(l))?;
            let b = tape.param(&Self::bias_name(l))?;
            let y = tape.conv2d(x, k, Some(b), Self::STRIDE, Self::PAD)?;
            x = tape.tanh(y);
        }
        Ok(x)
    }

    pub fn forward(&self, params: &ModelParams, image: &Image) -> Result<FeatureMap> {
        if (image.height(), image.width()) != (self.input_height, self.input_width) {
            return Err(Error::dim(format!(
                "tiny CNN expects {}×{} images, got {}×{}",
                self.input_height,
                self.input_width,
                image.height(),
                image.width()
            )));
        }
        let mut tape = Tape::with_params(params);
        let x = tape.constant(vec![3, self.input_height, self.input_width], image.to_chw())?;
        let y = self.forward_on(&mut tape, x)?;
        FeatureMap::new(
            self.out_channels(),
            self.out_height(),
            self.out_width(),
            tape.value(y).to_vec(),
        )
    }
}
