use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, RELU_GAIN};
use crate::numerics::{dim_err, prefixed, Graph, Module, Real, Result, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

impl PolicyConfig {
    pub fn new(latent_dim: usize, action_dim: usize) -> Self {
        Self {
            latent_dim,
            action_dim,
            feature_dim: 50,
            hidden_dim: 1024,
        }
    }
}

/// `linear -> LayerNorm -> tanh` bottleneck shared by actor and critic.
#[derive(Clone, Debug)]
pub struct Trunk<T> {
    pub linear: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Real> Trunk<T> {
    fn new(inputs: usize, features: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new(inputs, features, 1.0, rng),
            norm: LayerNorm::new(features),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        Ok(g.tanh(h))
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("linear", self.linear.params());
        out.extend(prefixed("norm", self.norm.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.linear.params_mut();
        out.extend(self.norm.params_mut());
        out
    }
}

/// Two hidden ReLU layers then a linear output.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: [Linear<T>; 3],
}

impl<T: Real> Mlp<T> {
    fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            layers: [
                Linear::new(inputs, hidden, RELU_GAIN, rng),
                Linear::new(hidden, hidden, RELU_GAIN, rng),
                Linear::new(hidden, outputs, 1.0, rng),
            ],
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, h)
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("l{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

fn check_latent<T: Real>(g: &Graph<T>, x: Var, dim: usize, who: &'static str) -> Result<usize> {
    match *g.shape(x) {
        [n, d] if d == dim => Ok(n),
        ref s => dim_err(who, format!("expected [N, {dim}], got {s:?}")),
    }
}

#[derive(Clone, Debug)]
pub struct Actor<T> {
    pub config: PolicyConfig,
    pub trunk: Trunk<T>,
    pub policy: Mlp<T>,
}

impl<T: Real> Actor<T> {
    pub fn new(config: PolicyConfig, rng: &mut Rng) -> Self {
        let trunk = Trunk::new(config.latent_dim, config.feature_dim, rng);
        let policy = Mlp::new(config.feature_dim, config.hidden_dim, config.action_dim, rng);
        Self { config, trunk, policy }
    }

    /// Mean action `tanh(mlp(trunk(z)))`, `[N, action_dim]`.
    pub fn mean(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        check_latent(g, latent, self.config.latent_dim, "actor")?;
        let h = self.trunk.forward(g, latent)?;
        let mu = self.policy.forward(g, h)?;
        Ok(g.tanh(mu))
    }

    /// Acts on a single latent vector outside any training graph.
    pub fn act(&self, latent: &[T], std: f64, clip: f64, deterministic: bool, rng: &mut Rng) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let z = g.constant(Tensor::new(vec![1, latent.len()], latent.to_vec())?);
        let mu = self.mean(&mut g, z)?;
        let mu: Vec<f64> = g.value(mu).to_f64_vec();
        let out = if deterministic {
            mu
        } else {
            mu.iter()
                .map(|&m| (m + clipped_noise(std, clip, rng)).clamp(-1.0, 1.0))
                .collect()
        };
        Ok(out.into_iter().map(T::from_f64).collect())
    }
}

/// Gaussian noise `N(0, std²)` clamped to `±clip`.
pub fn clipped_noise(std: f64, clip: f64, rng: &mut Rng) -> f64 {
    (rng.normal() * std).clamp(-clip, clip)
}

/// Adds clipped exploration noise to a batch of mean actions on the graph and
/// clamps to `[-1, 1]` with a straight-through gradient.
pub fn sample_action<T: Real>(g: &mut Graph<T>, mean: Var, std: f64, clip: f64, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(mean).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| clipped_noise(std, clip, rng)).collect();
    let noise = g.constant(Tensor::from_f64(&shape, &noise)?);
    let a = g.add(mean, noise)?;
    Ok(g.clamp_straight_through(a, -1.0, 1.0))
}

impl<T: Real> Module<T> for Actor<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("trunk", self.trunk.params());
        out.extend(prefixed("policy", self.policy.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.trunk.params_mut();
        out.extend(self.policy.params_mut());
        out
    }
}

/// Shared trunk feeding two independent Q heads over `trunk(z) ⊕ a`.
#[derive(Clone, Debug)]
pub struct TwinCritic<T> {
    pub config: PolicyConfig,
    pub trunk: Trunk<T>,
    pub q1: Mlp<T>,
    pub q2: Mlp<T>,
}

impl<T: Real> TwinCritic<T> {
    pub fn new(config: PolicyConfig, rng: &mut Rng) -> Self {
        let trunk = Trunk::new(config.latent_dim, config.feature_dim, rng);
        let inputs = config.feature_dim + config.action_dim;
        let q1 = Mlp::new(inputs, config.hidden_dim, 1, rng);
        let q2 = Mlp::new(inputs, config.hidden_dim, 1, rng);
        Self { config, trunk, q1, q2 }
    }

    /// Returns `(q1, q2)`, each `[N, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, latent: Var, action: Var) -> Result<(Var, Var)> {
        let n = check_latent(g, latent, self.config.latent_dim, "critic")?;
        if g.shape(action) != [n, self.config.action_dim] {
            return dim_err("critic", format!("action {:?} for batch {n}", g.shape(action)));
        }
        let h = self.trunk.forward(g, latent)?;
        let ha = g.concat(h, action)?;
        Ok((self.q1.forward(g, ha)?, self.q2.forward(g, ha)?))
    }

    /// Both Q estimates for one latent/action pair, outside any training graph.
    pub fn q_values(&self, latent: &[T], action: &[T]) -> Result<(T, T)> {
        let mut g = Graph::inference();
        let z = g.constant(Tensor::new(vec![1, latent.len()], latent.to_vec())?);
        let a = g.constant(Tensor::new(vec![1, action.len()], action.to_vec())?);
        let (q1, q2) = self.forward(&mut g, z, a)?;
        Ok((g.scalar(q1), g.scalar(q2)))
    }
}

impl<T: Real> Module<T> for TwinCritic<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("trunk", self.trunk.params());
        out.extend(prefixed("q1", self.q1.params()));
        out.extend(prefixed("q2", self.q2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.trunk.params_mut();
        out.extend(self.q1.params_mut());
        out.extend(self.q2.params_mut());
        out
    }
}
