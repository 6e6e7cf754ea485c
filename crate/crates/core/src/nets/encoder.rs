use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Linear};
use crate::numerics::{conv_out_size, dim_err, prefixed, Graph, Module, Real, Result, Rng, Tensor, Var};

pub const CONV_CHANNELS: usize = 32;
pub const POOL: usize = 4;

/// Spatial sizes along the encoder: input, after each of the four convs, and
/// after pooling. The decoders mirror this chain back up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub input: usize,
    pub conv: [usize; 4],
    pub pooled: usize,
}

impl Geometry {
    pub fn new(image_size: usize) -> Result<Self> {
        let too_small = || {
            dim_err(
                "encoder",
                format!("image size {image_size} too small for the conv stack"),
            )
        };
        if image_size < 3 {
            return too_small();
        }
        let c0 = conv_out_size(image_size, 3, 2);
        if c0 < 9 {
            return too_small();
        }
        let conv = [c0, c0 - 2, c0 - 4, c0 - 6];
        if conv[3] < POOL {
            return too_small();
        }
        Ok(Self {
            input: image_size,
            conv,
            pooled: conv_out_size(conv[3], POOL, POOL),
        })
    }

    pub fn flat_features(&self) -> usize {
        CONV_CHANNELS * self.pooled * self.pooled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    /// Emit a mean and log-std per latent unit and sample with the
    /// reparameterisation trick.
    pub gaussian: bool,
}

/// Four valid 3×3 convolutions (strides 2,1,1,1) with ReLUs, 4×4 average
/// pooling and a linear projection to the latent.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub geometry: Geometry,
    pub convs: Vec<Conv2d<T>>,
    pub head: Linear<T>,
}

/// Intermediate results of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[N, latent_dim]`; the posterior sample when the Gaussian head is on.
    pub latent: Var,
    /// ReLU activations after the last convolution, `[N, 32, s, s]`.
    pub features: Var,
    pub pooled: Var,
    /// Mean over the batch of KL(q(z|x) || N(0, I)); only with the Gaussian head.
    pub kl: Option<Var>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.latent_dim == 0 || config.latent_dim % 2 != 0 {
            return dim_err(
                "encoder",
                format!("latent_dim {} must be even and positive", config.latent_dim),
            );
        }
        let geometry = Geometry::new(config.image_size)?;
        let mut convs = vec![Conv2d::new(config.in_channels, CONV_CHANNELS, 3, 2, rng)];
        for _ in 0..3 {
            convs.push(Conv2d::new(CONV_CHANNELS, CONV_CHANNELS, 3, 1, rng));
        }
        let head_out = if config.gaussian {
            2 * config.latent_dim
        } else {
            config.latent_dim
        };
        let head = Linear::new(geometry.flat_features(), head_out, 1.0, rng);
        Ok(Self {
            config,
            geometry,
            convs,
            head,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `obs` is `[N, C, H, W]` with pixels in `[0, 1]`. `noise` supplies the
    /// posterior sample for the Gaussian head; without it the mean is used.
    pub fn forward(&self, g: &mut Graph<T>, obs: Var, noise: Option<&mut Rng>) -> Result<EncoderOutput> {
        let shape = g.shape(obs).to_vec();
        let c = self.config.in_channels;
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != c || shape[2] != s || shape[3] != s {
            return dim_err("encoder", format!("expected [N, {c}, {s}, {s}], got {shape:?}"));
        }
        let n = shape[0];
        let mut h = g.add_scalar(obs, -0.5);
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        let features = h;
        let pooled = g.avg_pool2d(features, POOL, POOL)?;
        let flat = g.reshape(pooled, &[n, self.geometry.flat_features()])?;
        let head = self.head.forward(g, flat)?;
        if !self.config.gaussian {
            return Ok(EncoderOutput {
                latent: head,
                features,
                pooled,
                kl: None,
            });
        }
        let d = self.config.latent_dim;
        let mu = g.slice(head, 0, d)?;
        let raw = g.slice(head, d, d)?;
        // Squash log-std into [-5, 2] to keep the variance sane.
        let t = g.tanh(raw);
        let t = g.scale(t, 3.5);
        let log_std = g.add_scalar(t, -1.5);
        let std = g.exp(log_std);
        let latent = match noise {
            Some(rng) => {
                let eps: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
                let eps = g.constant(Tensor::from_f64(&[n, d], &eps)?);
                let spread = g.mul(std, eps)?;
                g.add(mu, spread)?
            }
            None => mu,
        };
        // KL = 0.5 * sum(mu^2 + std^2 - 1 - 2 log std), averaged over the batch.
        let mu2 = g.mul(mu, mu)?;
        let var = g.mul(std, std)?;
        let a = g.add(mu2, var)?;
        let two_log = g.scale(log_std, 2.0);
        let b = g.sub(a, two_log)?;
        let b = g.add_scalar(b, -1.0);
        let total = g.sum(b);
        let kl = g.scale(total, 0.5 / n as f64);
        Ok(EncoderOutput {
            latent,
            features,
            pooled,
            kl: Some(kl),
        })
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.params()));
        }
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }
}
