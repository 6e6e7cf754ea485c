use serde::{Deserialize, Serialize};

use super::encoder::{Geometry, CONV_CHANNELS, POOL};
use super::layers::{ConvTranspose2d, Linear, RELU_GAIN};
use crate::numerics::{dim_err, prefixed, Graph, Module, Real, Result, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub input_dim: usize,
    pub out_channels: usize,
    pub image_size: usize,
    /// Channels after the first (pool-mirroring) transpose conv.
    pub first_channels: usize,
    pub output: OutputActivation,
}

impl DecoderConfig {
    /// Mask decoder: one sigmoid channel per stacked frame.
    pub fn mask(input_dim: usize, frame_stack: usize, image_size: usize) -> Self {
        Self {
            input_dim,
            out_channels: frame_stack,
            image_size,
            first_channels: 16,
            output: OutputActivation::Sigmoid,
        }
    }

    /// Reconstruction decoder: RGB for every stacked frame, identity output.
    pub fn recon(input_dim: usize, frame_stack: usize, image_size: usize) -> Self {
        Self {
            input_dim,
            out_channels: 3 * frame_stack,
            image_size,
            first_channels: 16,
            output: OutputActivation::Identity,
        }
    }
}

/// Linear + ReLU up to `32·P·P`, reshape to `32×P×P`, then five transpose
/// convolutions that retrace the encoder's spatial sizes in reverse. The
/// output padding of each layer is whatever the floor in the matching
/// forward layer discarded, so the output is exactly `image_size` square.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    pub geometry: Geometry,
    pub fc: Linear<T>,
    pub layers: Vec<ConvTranspose2d<T>>,
}

impl<T: Real> Decoder<T> {
    pub fn new(config: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        let geometry = Geometry::new(config.image_size)?;
        let p = geometry.pooled;
        let [c0, .., c3] = geometry.conv;
        let fc = Linear::new(config.input_dim, geometry.flat_features(), RELU_GAIN, rng);
        let first = config.first_channels;
        let last_pad = config.image_size - ((c0 - 1) * 2 + 3);
        let layers = vec![
            ConvTranspose2d::new(CONV_CHANNELS, first, POOL, POOL, c3 - POOL * p, rng),
            ConvTranspose2d::new(first, CONV_CHANNELS, 3, 1, 0, rng),
            ConvTranspose2d::new(CONV_CHANNELS, CONV_CHANNELS, 3, 1, 0, rng),
            ConvTranspose2d::new(CONV_CHANNELS, CONV_CHANNELS, 3, 1, 0, rng),
            ConvTranspose2d::new(CONV_CHANNELS, config.out_channels, 3, 2, last_pad, rng),
        ];
        Ok(Self {
            config,
            geometry,
            fc,
            layers,
        })
    }

    /// `z` is `[N, input_dim]`; returns `[N, out_channels, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return dim_err(
                "decoder",
                format!("expected [N, {}], got {shape:?}", self.config.input_dim),
            );
        }
        let p = self.geometry.pooled;
        let h = self.fc.forward(g, z)?;
        let h = g.relu(h);
        let mut h = g.reshape(h, &[shape[0], CONV_CHANNELS, p, p])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(match self.config.output {
            OutputActivation::Sigmoid => g.sigmoid(h),
            OutputActivation::Identity => h,
        })
    }

    /// Zeroes the last transpose conv, so the output is `sigmoid(0)` or `0`.
    pub fn zero_output_layer(&mut self) {
        self.layers.last_mut().expect("decoder has layers").zero();
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("fc", self.fc.params());
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("tconv{i}"), l.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.fc.params_mut();
        out.extend(self.layers.iter_mut().flat_map(|l| l.params_mut()));
        out
    }
}
