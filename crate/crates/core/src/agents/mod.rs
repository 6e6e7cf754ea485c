//! The structured-representation learner, its DrQ-style baselines and the
//! collect/update loop.

mod agent;
pub mod augment;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvConfig, EnvError, Task};
use crate::masktools::{MaskError, MaskMode, MaskPipelineConfig};
use crate::numerics::NumericsError;
use crate::replay::ReplayError;

pub use agent::{
    actor_loss, grad_norm, soft_update, stack_input, Agent, LossReport, Policy, Prepared, UpdateReport, CHECKPOINT_DIR,
};
pub use augment::{random_shift, shift_planes, Offset, ShiftLog};
pub use train::{
    code_version, evaluate, read_metrics, train, EvalResult, MaskSource, MetricsRecord, MetricsWriter, TrainSummary,
    MANIFEST_FILE, METRICS_FILE, WALL_TIME_FILE,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("environment failure: {0}")]
    Env(#[from] EnvError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for AgentError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Io(io) => Self::Io(io),
            other => Self::Numeric(other.to_string()),
        }
    }
}

impl From<ReplayError> for AgentError {
    fn from(e: ReplayError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<MaskError> for AgentError {
    fn from(e: MaskError) -> Self {
        Self::Config(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both decoders, each on its half of the latent.
    Sear,
    /// No decoders.
    Drq,
    /// One reconstruction decoder on the full latent.
    DrqAe,
    /// Masks stacked as a fourth channel per frame; no decoders.
    DrqRgbm,
    /// Both decoders read the full latent.
    SearNosplit,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Sear, Self::Drq, Self::DrqAe, Self::DrqRgbm, Self::SearNosplit];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sear => "sear",
            Self::Drq => "drq",
            Self::DrqAe => "drq-ae",
            Self::DrqRgbm => "drq-rgbm",
            Self::SearNosplit => "sear-nosplit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn has_mask_decoder(self) -> bool {
        matches!(self, Self::Sear | Self::SearNosplit)
    }

    pub fn has_recon_decoder(self) -> bool {
        matches!(self, Self::Sear | Self::SearNosplit | Self::DrqAe)
    }

    /// Whether decoders read their own half of the latent.
    pub fn splits_latent(self) -> bool {
        self == Self::Sear
    }

    pub fn mask_input(self) -> bool {
        self == Self::DrqRgbm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction coefficient.
    pub c1: f64,
    /// Mask coefficient.
    pub c2: f64,
    /// Posterior KL coefficient; a positive value switches on the Gaussian
    /// encoder head (experimental).
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            c1: 0.01,
            c2: 0.0025,
            kl: 0.0,
        }
    }
}

/// `start → end` linearly over `duration` steps, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub duration: u64,
}

impl LinearSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.duration == 0 {
            return self.end;
        }
        let t = (step as f64 / self.duration as f64).min(1.0);
        self.start + (self.end - self.start) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub variant: Variant,
    pub discount: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub tau: f64,
    /// Env steps between updates.
    pub update_every: u64,
    /// Frames (env steps × action repeat) collected before the first update.
    pub seed_frames: u64,
    /// Env steps of uniformly random actions at the start.
    pub exploration_steps: u64,
    pub std_schedule: LinearSchedule,
    pub std_clip: f64,
    pub shift_pad: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub decoder_lr: f64,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub replay_capacity: usize,
    pub weights: LossWeights,
}

impl AgentConfig {
    /// Single-CPU scale: 64 px observations and a 1024-d latent.
    pub fn desk() -> Self {
        Self {
            variant: Variant::Sear,
            discount: 0.99,
            n_step: 3,
            batch_size: 64,
            tau: 0.01,
            update_every: 2,
            seed_frames: 4000,
            exploration_steps: 2000,
            std_schedule: LinearSchedule {
                start: 1.0,
                end: 0.1,
                duration: 50_000,
            },
            std_clip: 0.3,
            shift_pad: 4,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            decoder_lr: 1e-4,
            latent_dim: 1024,
            feature_dim: 50,
            hidden_dim: 1024,
            replay_capacity: 50_000,
            weights: LossWeights::default(),
        }
    }

    /// The published single-task hyperparameters.
    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            std_schedule: LinearSchedule {
                start: 1.0,
                end: 0.1,
                duration: 500_000,
            },
            latent_dim: 4096,
            replay_capacity: 250_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must lie in (0, 1), got {}", self.discount));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        for (name, v) in [
            ("c1", self.weights.c1),
            ("c2", self.weights.c2),
            ("kl", self.weights.kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("decoder_lr", self.decoder_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return bad(format!("latent_dim must be even and positive, got {}", self.latent_dim));
        }
        for (name, v) in [
            ("n_step", self.n_step),
            ("batch_size", self.batch_size),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.update_every == 0 {
            return bad("update_every must be positive".into());
        }
        if self.replay_capacity <= self.n_step {
            return bad(format!("replay_capacity must exceed n_step ({})", self.n_step));
        }
        if !(self.std_schedule.start >= 0.0 && self.std_schedule.end >= 0.0 && self.std_clip >= 0.0) {
            return bad("exploration std and clip must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Self::Desk),
            "paper" => Some(Self::Paper),
            _ => None,
        }
    }
}

/// Everything a training run needs besides the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub mask_mode: MaskMode,
    pub masks: MaskPipelineConfig,
    /// Env steps to run.
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Env steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Write one update record per this many updates.
    pub log_every: u64,
    /// Run evaluations on a second thread against a parameter snapshot.
    pub eval_thread: bool,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                seed: 0,
                env: EnvConfig {
                    image_size: 64,
                    task: Task::Reach,
                    ..EnvConfig::default()
                },
                agent: AgentConfig::desk(),
                mask_mode: MaskMode::Exact,
                masks: MaskPipelineConfig::default(),
                total_steps: 60_000,
                eval_every: 2_500,
                eval_episodes: 10,
                checkpoint_every: 0,
                log_every: 1,
                eval_thread: false,
            },
            Preset::Paper => Self {
                env: EnvConfig::default(),
                agent: AgentConfig::paper(),
                total_steps: 1_000_000,
                eval_every: 10_000,
                ..Self::preset(Preset::Desk)
            },
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.env.validate()?;
        self.agent.validate()?;
        self.masks.validate()?;
        if self.eval_every == 0 || self.log_every == 0 {
            return Err(AgentError::Config("eval_every and log_every must be positive".into()));
        }
        if self.agent.replay_capacity < self.env.frame_stack + self.agent.n_step {
            return Err(AgentError::Config("replay_capacity is smaller than one window".into()));
        }
        Ok(())
    }
}
