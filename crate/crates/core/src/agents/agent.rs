use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::augment::{shift_planes, Offset, ShiftLog};
use super::{AgentConfig, AgentError, Variant};
use crate::envs::EnvConfig;
use crate::nets::{sample_action, Actor, Decoder, DecoderConfig, Encoder, EncoderConfig, PolicyConfig, TwinCritic};
use crate::numerics::{
    accumulate_grads, load_checkpoint, prefixed, save_checkpoint, zero_grads, Adam, AdamConfig, Graph, Module, Real,
    Rng, Tensor, Var,
};
use crate::replay::Batch;

pub const CHECKPOINT_DIR: &str = "checkpoints";
const BCE_EPS: f64 = 1e-6;
const ACTION_DIM: usize = 2;

/// Loss components of one critic/decoder update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic: f64,
    pub recon: f64,
    pub mask: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub losses: LossReport,
    pub actor: f64,
    /// L2 norm of the gradient the actor loss sent into the encoder.
    pub encoder_grad_from_actor: f64,
}

/// An augmented batch as network-ready tensors.
pub struct Prepared {
    /// `[B, C, H, W]` encoder input.
    pub obs: Tensor<f32>,
    /// `[B, 3S, H, W]` augmented pixels in `[0, 1]`.
    pub image_target: Tensor<f32>,
    /// `[B, S, H, W]` augmented binary masks.
    pub mask_target: Tensor<f32>,
    pub next_obs: Tensor<f32>,
    /// `[B, A]`
    pub actions: Tensor<f32>,
    pub returns: Vec<f32>,
    pub discounts: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Streams {
    aug: Rng,
    target: Rng,
    actor: Rng,
    posterior: Rng,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub env: EnvConfig,
    pub seed: u64,
    pub encoder: Encoder<f32>,
    pub actor: Actor<f32>,
    pub critic: TwinCritic<f32>,
    pub critic_target: TwinCritic<f32>,
    pub mask_decoder: Option<Decoder<f32>>,
    pub recon_decoder: Option<Decoder<f32>>,
    encoder_opt: Adam<f32>,
    actor_opt: Adam<f32>,
    critic_opt: Adam<f32>,
    mask_opt: Adam<f32>,
    recon_opt: Adam<f32>,
    streams: Streams,
    /// When set, every applied augmentation offset is recorded here.
    pub shift_log: Option<ShiftLog>,
}

impl Agent {
    pub fn new(config: AgentConfig, env: EnvConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        env.validate()?;
        let root = Rng::new(seed).split("agent");
        let s = env.frame_stack;
        let in_channels = if config.variant.mask_input() { 4 * s } else { 3 * s };
        let encoder = Encoder::new(
            EncoderConfig {
                in_channels,
                image_size: env.image_size,
                latent_dim: config.latent_dim,
                gaussian: config.weights.kl > 0.0,
            },
            &mut root.split("encoder"),
        )?;
        let policy = PolicyConfig {
            latent_dim: config.latent_dim,
            action_dim: ACTION_DIM,
            feature_dim: config.feature_dim,
            hidden_dim: config.hidden_dim,
        };
        let actor = Actor::new(policy.clone(), &mut root.split("actor"));
        let critic = TwinCritic::new(policy, &mut root.split("critic"));
        let critic_target = critic.clone();
        // Decoders draw from their own streams so that adding them never
        // perturbs the initialisation of the shared networks.
        let dec_in = if config.variant.splits_latent() {
            config.latent_dim / 2
        } else {
            config.latent_dim
        };
        let mask_decoder = match config.variant.has_mask_decoder() {
            true => Some(Decoder::new(
                DecoderConfig::mask(dec_in, s, env.image_size),
                &mut root.split("mask-decoder"),
            )?),
            false => None,
        };
        let recon_decoder = match config.variant.has_recon_decoder() {
            true => Some(Decoder::new(
                DecoderConfig::recon(dec_in, s, env.image_size),
                &mut root.split("recon-decoder"),
            )?),
            false => None,
        };
        let streams = Streams {
            aug: root.split("augment"),
            target: root.split("target-noise"),
            actor: root.split("actor-noise"),
            posterior: root.split("posterior"),
        };
        Ok(Self {
            encoder_opt: Adam::new(AdamConfig::with_lr(config.critic_lr)),
            actor_opt: Adam::new(AdamConfig::with_lr(config.actor_lr)),
            critic_opt: Adam::new(AdamConfig::with_lr(config.critic_lr)),
            mask_opt: Adam::new(AdamConfig::with_lr(config.decoder_lr)),
            recon_opt: Adam::new(AdamConfig::with_lr(config.decoder_lr)),
            config,
            env,
            seed,
            encoder,
            actor,
            critic,
            critic_target,
            mask_decoder,
            recon_decoder,
            streams,
            shift_log: None,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn exploration_std(&self, step: u64) -> f64 {
        self.config.std_schedule.value(step)
    }

    pub fn network_input(&self, frames: &[u8], masks: &[u8], batch: usize) -> Result<Tensor<f32>, AgentError> {
        stack_input(&self.env, self.variant().mask_input(), frames, masks, batch)
    }

    /// Deterministic acting networks, detached from training state.
    pub fn policy(&self) -> Policy {
        Policy {
            env: self.env.clone(),
            variant: self.variant(),
            encoder: self.encoder.clone(),
            actor: self.actor.clone(),
        }
    }

    /// Latent of one stacked observation, outside any training graph.
    pub fn encode(&self, frames: &[u8], masks: &[u8]) -> Result<Vec<f32>, AgentError> {
        let (latent, _) = self.encode_with_features(frames, masks)?;
        Ok(latent)
    }

    /// Latent plus the post-ReLU activations of the last convolution.
    pub fn encode_with_features(&self, frames: &[u8], masks: &[u8]) -> Result<(Vec<f32>, Tensor<f32>), AgentError> {
        let mut g = Graph::inference();
        let x = g.constant(self.network_input(frames, masks, 1)?);
        let out = self.encoder.forward(&mut g, x, None)?;
        Ok((g.value(out.latent).data().to_vec(), g.value(out.features).clone()))
    }

    /// Action for one stacked observation. `eval` selects the mean action.
    pub fn act(
        &self,
        frames: &[u8],
        masks: &[u8],
        step: u64,
        eval: bool,
        rng: &mut Rng,
    ) -> Result<[f64; 2], AgentError> {
        let z = self.encode(frames, masks)?;
        let a = self
            .actor
            .act(&z, self.exploration_std(step), self.config.std_clip, eval, rng)?;
        Ok([a[0] as f64, a[1] as f64])
    }

    /// Applies independent random shifts to each sample of the batch (one
    /// offset shared by its image and mask) and to each next observation.
    pub fn prepare(&mut self, batch: &Batch) -> Result<Prepared, AgentError> {
        let (s, n, pad) = (self.env.frame_stack, self.env.image_size, self.config.shift_pad);
        let b = batch.size;
        let (img_len, mask_len) = (3 * s * n * n, s * n * n);
        let mut aug = |frames: &[u8], masks: &[u8], log: &mut Option<ShiftLog>| {
            let mut out_f = Vec::with_capacity(frames.len());
            let mut out_m = Vec::with_capacity(masks.len());
            for i in 0..b {
                let offset = Offset::sample(pad, &mut self.streams.aug);
                let f = shift_planes(&frames[i * img_len..][..img_len], n, pad, offset);
                let m = shift_planes(&masks[i * mask_len..][..mask_len], n, pad, offset);
                if let Some(log) = log.as_mut() {
                    log.image.push(offset);
                    log.mask.push(offset);
                }
                out_f.extend(f);
                out_m.extend(m);
            }
            (out_f, out_m)
        };
        let mut log = self.shift_log.take();
        let (obs, masks) = aug(&batch.obs, &batch.masks, &mut log);
        let (next_obs, next_masks) = aug(&batch.next_obs, &batch.next_masks, &mut log);
        self.shift_log = log;
        Ok(Prepared {
            obs: self.network_input(&obs, &masks, b)?,
            image_target: Tensor::new(vec![b, 3 * s, n, n], obs.iter().map(|&v| v as f32 / 255.0).collect())?,
            mask_target: Tensor::new(vec![b, s, n, n], masks.iter().map(|&v| v as f32).collect())?,
            next_obs: self.network_input(&next_obs, &next_masks, b)?,
            actions: Tensor::new(vec![b, ACTION_DIM], batch.actions.clone())?,
            returns: batch.returns.clone(),
            discounts: batch.discounts.clone(),
        })
    }

    /// Bootstrapped targets `R + γⁿ·min(Q'₁, Q'₂)(z', π(z') + ε)` where `z'` is
    /// the online encoding of the augmented next observation. Computed on an
    /// inference tape, so no gradient reaches any network.
    pub fn critic_targets(
        &mut self,
        next_obs: &Tensor<f32>,
        returns: &[f32],
        discounts: &[f32],
        std: f64,
    ) -> Result<Vec<f32>, AgentError> {
        let mut g = Graph::inference();
        let x = g.constant(next_obs.clone());
        let z = self.encoder.forward(&mut g, x, None)?.latent;
        let mu = self.actor.mean(&mut g, z)?;
        let a = sample_action(&mut g, mu, std, self.config.std_clip, &mut self.streams.target)?;
        let (q1, q2) = self.critic_target.forward(&mut g, z, a)?;
        let q = g.minimum(q1, q2)?;
        g.check_finite()
            .map_err(|e| AgentError::Numeric(format!("critic target: {e}")))?;
        Ok(g.value(q)
            .data()
            .iter()
            .zip(returns.iter().zip(discounts))
            .map(|(&q, (&r, &d))| r + d * q)
            .collect())
    }

    /// One joint step on `critic + c1·recon + c2·mask (+ kl·KL)` for the
    /// encoder, critic and decoders. Terms with a zero coefficient are still
    /// reported but left out of the backward pass. Returns the report and the
    /// pre-update latent for the actor step.
    pub fn update_critic_and_decoders(
        &mut self,
        p: &Prepared,
        step: u64,
    ) -> Result<(LossReport, Tensor<f32>), AgentError> {
        let w = self.config.weights;
        let std = self.exploration_std(step);
        let targets = self.critic_targets(&p.next_obs, &p.returns, &p.discounts, std)?;
        let b = p.returns.len();
        let y = Tensor::new(vec![b, 1], targets)?;

        let mut g = Graph::new();
        let x = g.constant(p.obs.clone());
        let noise = if w.kl > 0.0 {
            Some(&mut self.streams.posterior)
        } else {
            None
        };
        let enc = self.encoder.forward(&mut g, x, noise)?;
        let latent = enc.latent;
        let a = g.constant(p.actions.clone());
        let (q1, q2) = self.critic.forward(&mut g, latent, a)?;
        let l1 = g.mse(q1, &y)?;
        let l2 = g.mse(q2, &y)?;
        let critic = g.add(l1, l2)?;

        let d = self.config.latent_dim;
        let split = self.variant().splits_latent();
        let mut total = critic;
        let mut report = LossReport::default();
        if let Some(dec) = &self.mask_decoder {
            let z = if split { g.slice(latent, 0, d / 2)? } else { latent };
            let pred = dec.forward(&mut g, z)?;
            let loss = g.bce(pred, &p.mask_target, BCE_EPS)?;
            report.mask = g.scalar(loss).as_f64();
            total = weighted(&mut g, total, loss, w.c2)?;
        }
        if let Some(dec) = &self.recon_decoder {
            let z = if split { g.slice(latent, d / 2, d / 2)? } else { latent };
            let pred = dec.forward(&mut g, z)?;
            let loss = g.mse(pred, &p.image_target)?;
            report.recon = g.scalar(loss).as_f64();
            total = weighted(&mut g, total, loss, w.c1)?;
        }
        if let Some(kl) = enc.kl {
            report.kl = g.scalar(kl).as_f64();
            total = weighted(&mut g, total, kl, w.kl)?;
        }
        report.critic = g.scalar(critic).as_f64();
        report.total = g.scalar(total).as_f64();
        if let Some((id, op)) = g.first_non_finite() {
            return Err(AgentError::Numeric(format!(
                "non-finite value at op #{id} ({op}) in update at step {step}: critic {}, recon {}, mask {}, kl {}",
                report.critic, report.recon, report.mask, report.kl
            )));
        }
        g.backward(total)?;
        let latent_value = g.value(latent).clone();

        zero_grads(&mut self.encoder);
        zero_grads(&mut self.critic);
        accumulate_grads(&mut self.encoder, &g);
        accumulate_grads(&mut self.critic, &g);
        self.encoder_opt.step_module(&mut self.encoder)?;
        self.critic_opt.step_module(&mut self.critic)?;
        if let Some(dec) = self.mask_decoder.as_mut().filter(|_| w.c2 > 0.0) {
            zero_grads(dec);
            accumulate_grads(dec, &g);
            self.mask_opt.step_module(dec)?;
        }
        if let Some(dec) = self.recon_decoder.as_mut().filter(|_| w.c1 > 0.0) {
            zero_grads(dec);
            accumulate_grads(dec, &g);
            self.recon_opt.step_module(dec)?;
        }
        Ok((report, latent_value))
    }

    /// Policy step on a detached latent against the current critic, whose
    /// parameters are held fixed. Returns the actor loss and the norm of the
    /// gradient that reached the encoder (zero by construction).
    pub fn update_actor(&mut self, latent: &Tensor<f32>, step: u64) -> Result<(f64, f64), AgentError> {
        let std = self.exploration_std(step);
        let clip = self.config.std_clip;
        let critic = &self.critic;
        let mut g = Graph::new();
        let loss = actor_loss(
            &mut g,
            &self.actor,
            latent,
            std,
            clip,
            &mut self.streams.actor,
            |g, z, a| critic.forward(g, z, a),
        )?;
        g.backward(loss)?;
        zero_grads(&mut self.actor);
        accumulate_grads(&mut self.actor, &g);
        self.actor_opt.step_module(&mut self.actor)?;
        zero_grads(&mut self.encoder);
        accumulate_grads(&mut self.encoder, &g);
        let leaked = grad_norm(&self.encoder);
        Ok((g.scalar(loss).as_f64(), leaked))
    }

    /// `θ' ← τθ + (1 − τ)θ'` for the target critic.
    pub fn soft_update(&mut self) {
        soft_update(&mut self.critic_target, &self.critic, self.config.tau);
    }

    pub fn update(&mut self, batch: &Batch, step: u64) -> Result<UpdateReport, AgentError> {
        let prepared = self.prepare(batch)?;
        let (losses, latent) = self.update_critic_and_decoders(&prepared, step)?;
        let (actor, leaked) = self.update_actor(&latent, step)?;
        self.soft_update();
        Ok(UpdateReport {
            losses,
            actor,
            encoder_grad_from_actor: leaked,
        })
    }

    /// Every network's parameters, prefixed by the network name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = prefixed("encoder", self.encoder.params());
        out.extend(prefixed("actor", self.actor.params()));
        out.extend(prefixed("critic", self.critic.params()));
        out.extend(prefixed("critic_target", self.critic_target.params()));
        if let Some(d) = &self.mask_decoder {
            out.extend(prefixed("mask_decoder", d.params()));
        }
        if let Some(d) = &self.recon_decoder {
            out.extend(prefixed("recon_decoder", d.params()));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.actor.params_mut());
        out.extend(self.critic.params_mut());
        out.extend(self.critic_target.params_mut());
        if let Some(d) = &mut self.mask_decoder {
            out.extend(d.params_mut());
        }
        if let Some(d) = &mut self.recon_decoder {
            out.extend(d.params_mut());
        }
        out
    }

    /// Writes network parameters and the configuration. Optimizer state is
    /// not saved.
    pub fn save(&self, dir: &Path, step: u64) -> Result<(), AgentError> {
        let meta = json!({
            "agent": self.config,
            "env": self.env,
            "seed": self.seed,
            "step": step,
        });
        save_checkpoint(dir, &self.named_params(), meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, u64), AgentError> {
        let ckpt = load_checkpoint::<f32>(dir)?;
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| AgentError::Config(format!("checkpoint metadata lacks `{k}`")))
        };
        let parse_err = |e: serde_json::Error| AgentError::Config(format!("checkpoint metadata: {e}"));
        let config: AgentConfig = serde_json::from_value(field("agent")?).map_err(parse_err)?;
        let env: EnvConfig = serde_json::from_value(field("env")?).map_err(parse_err)?;
        let seed = field("seed")?.as_u64().unwrap_or(0);
        let step = field("step")?.as_u64().unwrap_or(0);
        let mut agent = Self::new(config, env, seed)?;
        let names: Vec<String> = agent.named_params().into_iter().map(|(n, _)| n).collect();
        ckpt.restore_into(&names, agent.named_params_mut())?;
        Ok((agent, step))
    }
}

/// Encoder input for `batch` stacked observations: pixels scaled to
/// `[0, 1]`, with each frame's mask appended after its RGB planes when
/// `mask_input` is set.
pub fn stack_input(
    env: &EnvConfig,
    mask_input: bool,
    frames: &[u8],
    masks: &[u8],
    batch: usize,
) -> Result<Tensor<f32>, AgentError> {
    let (s, n) = (env.frame_stack, env.image_size);
    let plane = n * n;
    if frames.len() != batch * 3 * s * plane || masks.len() != batch * s * plane {
        return Err(AgentError::Config(format!(
            "observation of {} pixels and {} mask pixels does not fit batch {batch} of {s}x{n}x{n}",
            frames.len(),
            masks.len()
        )));
    }
    let scale = |v: &u8| *v as f32 / 255.0;
    let (data, c): (Vec<f32>, usize) = if mask_input {
        let mut out = Vec::with_capacity(batch * 4 * s * plane);
        for b in 0..batch {
            for f in 0..s {
                out.extend(frames[(b * s + f) * 3 * plane..][..3 * plane].iter().map(scale));
                out.extend(masks[(b * s + f) * plane..][..plane].iter().map(|&m| m as f32));
            }
        }
        (out, 4 * s)
    } else {
        (frames.iter().map(scale).collect(), 3 * s)
    };
    Ok(Tensor::new(vec![batch, c, n, n], data)?)
}

/// Encoder and actor only, for evaluation.
#[derive(Clone, Debug)]
pub struct Policy {
    pub env: EnvConfig,
    pub variant: Variant,
    pub encoder: Encoder<f32>,
    pub actor: Actor<f32>,
}

impl Policy {
    /// Mean action for one stacked observation.
    pub fn act(&self, frames: &[u8], masks: &[u8]) -> Result<[f64; 2], AgentError> {
        let mut g = Graph::inference();
        let x = g.constant(stack_input(&self.env, self.variant.mask_input(), frames, masks, 1)?);
        let z = self.encoder.forward(&mut g, x, None)?.latent;
        let a = self.actor.mean(&mut g, z)?;
        let a = g.value(a).data();
        Ok([a[0] as f64, a[1] as f64])
    }
}

fn weighted(g: &mut Graph<f32>, total: Var, loss: Var, coefficient: f64) -> Result<Var, AgentError> {
    if coefficient == 0.0 {
        return Ok(total);
    }
    let term = g.scale(loss, coefficient);
    Ok(g.add(total, term)?)
}

/// `−mean(min(Q₁, Q₂))` at `π(z) + ε` for a constant latent. `q` builds the
/// two Q estimates; its parameters are registered as constants so that only
/// the actor receives gradients.
pub fn actor_loss<T: Real, F>(
    g: &mut Graph<T>,
    actor: &Actor<T>,
    latent: &Tensor<T>,
    std: f64,
    clip: f64,
    rng: &mut Rng,
    q: F,
) -> Result<Var, AgentError>
where
    F: FnOnce(&mut Graph<T>, Var, Var) -> crate::numerics::Result<(Var, Var)>,
{
    let z = g.constant(latent.clone());
    let mu = actor.mean(g, z)?;
    let a = sample_action(g, mu, std, clip, rng)?;
    g.set_params_trainable(false);
    let qs = q(g, z, a);
    g.set_params_trainable(true);
    let (q1, q2) = qs?;
    let q = g.minimum(q1, q2)?;
    let m = g.mean(q);
    Ok(g.scale(m, -1.0))
}

/// Polyak averaging of `target` toward `online`.
pub fn soft_update<T: Real, M: Module<T>>(target: &mut M, online: &M, tau: f64) {
    let src: Vec<Vec<T>> = online.params().iter().map(|(_, t)| t.data().to_vec()).collect();
    let tau = T::from_f64(tau);
    for (t, s) in target.params_mut().into_iter().zip(src) {
        for (a, &b) in t.data_mut().iter_mut().zip(&s) {
            // Same as τb + (1 − τ)a, but exact once a == b.
            *a += tau * (b - *a);
        }
    }
}

pub fn grad_norm<T: Real, M: Module<T>>(m: &M) -> f64 {
    m.params()
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}
