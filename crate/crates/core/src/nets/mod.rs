//! Network architectures: a convolutional encoder whose latent is split into
//! an agent half and an environment half, transpose-conv decoders for masks
//! and images, and the actor / twin-critic heads.

mod decoder;
mod encoder;
pub mod layers;
mod policy;

pub use decoder::{Decoder, DecoderConfig, OutputActivation};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput, Geometry, CONV_CHANNELS};
pub use policy::{clipped_noise, sample_action, Actor, Mlp, PolicyConfig, Trunk, TwinCritic};

use crate::numerics::{dim_err, Graph, Real, Result, Var};

/// A latent vector split positionally: `z_r` is the first half (agent),
/// `z_e` the second half (environment).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T> {
    pub z_r: Vec<T>,
    pub z_e: Vec<T>,
}

impl<T: Real> LatentPair<T> {
    pub fn from_full(full: &[T]) -> Result<Self> {
        if full.is_empty() || full.len() % 2 != 0 {
            return dim_err("latent split", format!("length {} is not even", full.len()));
        }
        let (r, e) = full.split_at(full.len() / 2);
        Ok(Self {
            z_r: r.to_vec(),
            z_e: e.to_vec(),
        })
    }

    pub fn full(&self) -> Vec<T> {
        let mut v = self.z_r.clone();
        v.extend_from_slice(&self.z_e);
        v
    }
}

/// Splits a `[N, D]` latent on the graph into its `[N, D/2]` halves.
pub fn split_latent<T: Real>(g: &mut Graph<T>, latent: Var) -> Result<(Var, Var)> {
    let d = match *g.shape(latent) {
        [_, d] if d % 2 == 0 => d,
        ref s => return dim_err("latent split", format!("expected [N, even], got {s:?}")),
    };
    Ok((g.slice(latent, 0, d / 2)?, g.slice(latent, d / 2, d / 2)?))
}
