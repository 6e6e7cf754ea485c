//! Run configuration: a preset, then a TOML file, then `--set` overrides.
//!
//! The file holds top-level run keys plus one level of tables (`[env]`,
//! `[agent]`, `[masks]`, `[toy]`). Every table rejects unknown keys, and
//! parse errors carry the offending line.

use std::path::Path;

use sear_core::agents::{Preset, TrainConfig, Variant};
use sear_core::envs::{Distractor, Task};
use sear_core::masktools::MaskMode;
use sear_core::toylab::{RewardFlavor, ToyConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Declares an all-optional overlay struct and how each key lands on the
/// target config.
macro_rules! overlay {
    (
        $name:ident => $target:ty { $($key:ident : $ty:ty = $($path:ident).+),* $(,)? }
        $(tables { $($table:ident : $tty:ty),* $(,)? })?
        $(unmapped { $($loose:ident : $lty:ty),* $(,)? })?
    ) => {
        #[derive(Clone, Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(pub $key: Option<$ty>,)*
            $($(#[serde(default)] pub $table: $tty,)*)?
            $($(pub $loose: Option<$lty>,)*)?
        }

        impl $name {
            pub fn apply(&self, t: &mut $target) {
                $(if let Some(v) = &self.$key {
                    t.$($path).+ = v.clone();
                })*
            }

            /// Keys set in `later` win.
            pub fn merge(&mut self, later: Self) {
                $(if later.$key.is_some() {
                    self.$key = later.$key;
                })*
                $($(self.$table.merge(later.$table);)*)?
                $($(if later.$loose.is_some() {
                    self.$loose = later.$loose;
                })*)?
            }
        }
    };
}

overlay!(ConfigFile => TrainConfig {
    seed: u64 = seed,
    total_steps: u64 = total_steps,
    eval_every: u64 = eval_every,
    eval_episodes: usize = eval_episodes,
    checkpoint_every: u64 = checkpoint_every,
    log_every: u64 = log_every,
    eval_thread: bool = eval_thread,
    mask_mode: MaskMode = mask_mode,
}
tables {
    env: EnvOverlay,
    agent: AgentOverlay,
    masks: MaskOverlay,
    toy: ToyOverlay,
}
unmapped {
    preset: String,
});

overlay!(EnvOverlay => TrainConfig {
    image_size: usize = env.image_size,
    frame_stack: usize = env.frame_stack,
    action_repeat: usize = env.action_repeat,
    episode_length: usize = env.episode_length,
    task: Task = env.task,
    distractor: Distractor = env.distractor,
    sparse_reward: bool = env.sparse_reward,
});

overlay!(AgentOverlay => TrainConfig {
    variant: Variant = agent.variant,
    discount: f64 = agent.discount,
    n_step: usize = agent.n_step,
    batch_size: usize = agent.batch_size,
    tau: f64 = agent.tau,
    update_every: u64 = agent.update_every,
    seed_frames: u64 = agent.seed_frames,
    exploration_steps: u64 = agent.exploration_steps,
    std_start: f64 = agent.std_schedule.start,
    std_end: f64 = agent.std_schedule.end,
    std_duration: u64 = agent.std_schedule.duration,
    std_clip: f64 = agent.std_clip,
    shift_pad: usize = agent.shift_pad,
    actor_lr: f64 = agent.actor_lr,
    critic_lr: f64 = agent.critic_lr,
    decoder_lr: f64 = agent.decoder_lr,
    latent_dim: usize = agent.latent_dim,
    feature_dim: usize = agent.feature_dim,
    hidden_dim: usize = agent.hidden_dim,
    replay_capacity: usize = agent.replay_capacity,
    c1: f64 = agent.weights.c1,
    c2: f64 = agent.weights.c2,
    kl: f64 = agent.weights.kl,
});

overlay!(MaskOverlay => TrainConfig {
    render_scale: usize = masks.render_scale,
    opening_kernel: usize = masks.opening_kernel,
    noise_p: f64 = masks.noise_p,
    approx_downsample: usize = masks.approx_downsample,
    blur_sigma: f64 = masks.blur_sigma,
    threshold: f64 = masks.threshold,
    joint_patch_radius: usize = masks.joint_patch_radius,
});

overlay!(ToyOverlay => ToySettings {
    d_obs: usize = toy.d_obs,
    d_r: usize = toy.d_r,
    eps_scale: f64 = toy.eps_scale,
    k: usize = toy.k,
    data_episodes: usize = toy.data_episodes,
    episode_len: usize = toy.episode_len,
    step_size: f64 = toy.step_size,
    horizon: usize = toy.horizon,
    candidates: usize = toy.candidates,
    eval_episodes: usize = toy.eval_episodes,
    seeds: u64 = seeds,
    reward_model: RewardKind = reward_model,
    ridge: f64 = ridge,
    mlp_hidden: usize = mlp_hidden,
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Quadratic,
    Mlp,
}

/// Toy-experiment settings in flat form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToySettings {
    pub toy: ToyConfig,
    pub seeds: u64,
    pub reward_model: RewardKind,
    pub ridge: f64,
    pub mlp_hidden: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            seeds: 10,
            reward_model: RewardKind::Quadratic,
            ridge: 1e-6,
            mlp_hidden: 32,
        }
    }
}

impl ToySettings {
    pub fn resolved(&self) -> ToyConfig {
        let flavor = match self.reward_model {
            RewardKind::Quadratic => RewardFlavor::Quadratic { ridge: self.ridge },
            RewardKind::Mlp => RewardFlavor::Mlp {
                hidden: self.mlp_hidden,
            },
        };
        ToyConfig {
            flavor,
            ..self.toy.clone()
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {}", e.to_string().trim_end())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses one `key=value` or `table.key=value` override. Bare words
    /// are taken as strings, so `agent.variant=drq` works unquoted.
    pub fn from_override(spec: &str) -> Result<Self, CliError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let (table, key) = match key.split_once('.') {
            Some((t, k)) => (Some(t), k),
            None => (None, key),
        };
        let head = table.map(|t| format!("[{t}]\n")).unwrap_or_default();
        let origin = format!("--set {spec}");
        let doc = format!("{head}{key} = {value}\n");
        match Self::parse(&doc, &origin) {
            Ok(c) => Ok(c),
            Err(first) => {
                let quoted = format!("{head}{key} = {}\n", toml::Value::String(value.to_string()));
                Self::parse(&quoted, &origin).map_err(|_| first)
            }
        }
    }
}

/// Fully resolved settings for any subcommand.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub toy: ToySettings,
}

pub fn parse_preset(name: &str) -> Result<Preset, CliError> {
    Preset::parse(name).ok_or_else(|| CliError::Config(format!("unknown preset `{name}` (expected desk or paper)")))
}

/// Layers preset < file < `--seed` < `--set`, then validates.
pub fn resolve(
    file: Option<&Path>,
    preset_flag: Option<&str>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let mut layered = match file {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = seed {
        layered.seed = Some(s);
    }
    for o in overrides {
        layered.merge(ConfigFile::from_override(o)?);
    }
    let name = preset_flag.or(layered.preset.as_deref()).unwrap_or("desk");
    let preset = parse_preset(name)?;
    let mut train = TrainConfig::preset(preset);
    layered.apply(&mut train);
    layered.env.apply(&mut train);
    layered.agent.apply(&mut train);
    layered.masks.apply(&mut train);
    // Bad env settings are config mistakes here, not runtime env failures.
    train.env.validate().map_err(|e| CliError::Config(e.to_string()))?;
    train.validate()?;
    let mut toy = ToySettings::default();
    layered.toy.apply(&mut toy);
    toy.resolved().validate()?;
    Ok(RunConfig { preset, train, toy })
}
