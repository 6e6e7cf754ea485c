use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::agent::{Agent, Policy, UpdateReport, CHECKPOINT_DIR};
use super::{AgentError, TrainConfig};
use crate::envs::{render, Env, EnvConfig};
use crate::masktools::{add_noise, approximate, joint_patches, preprocess, Mask, MaskMode, MaskPipelineConfig};
use crate::numerics::Rng;
use crate::replay::{ReplayBuffer, ReplayError, Transition};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WALL_TIME_FILE: &str = "wall_time.jsonl";

/// One metrics line. Fields that do not apply to a record kind are null.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `update`, `episode` or `eval`.
    pub kind: String,
    pub step: u64,
    pub episode_return: Option<f64>,
    pub eval_success: Option<f64>,
    pub critic_loss: Option<f64>,
    pub recon_loss: Option<f64>,
    pub mask_loss: Option<f64>,
    pub kl_loss: Option<f64>,
    pub total_loss: Option<f64>,
    pub actor_loss: Option<f64>,
}

impl MetricsRecord {
    fn update(step: u64, r: &UpdateReport, last_return: Option<f64>) -> Self {
        Self {
            kind: "update".into(),
            step,
            episode_return: last_return,
            critic_loss: Some(r.losses.critic),
            recon_loss: Some(r.losses.recon),
            mask_loss: Some(r.losses.mask),
            kl_loss: Some(r.losses.kl),
            total_loss: Some(r.losses.total),
            actor_loss: Some(r.actor),
            ..Self::default()
        }
    }
}

/// Append-only JSON-lines writer; each record goes out in one write call.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        File::create(path)?;
        Self::append(path)
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            file: OpenOptions::new().append(true).create(true).open(path)?,
        })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// Turns the renderer's exact mask of the env's latest frame into the mask
/// the learner sees.
pub struct MaskSource {
    pub mode: MaskMode,
    pub config: MaskPipelineConfig,
    rng: Rng,
}

impl MaskSource {
    pub fn new(mode: MaskMode, config: MaskPipelineConfig, rng: Rng) -> Self {
        Self { mode, config, rng }
    }

    pub fn mask(&mut self, env: &Env) -> Result<Vec<u8>, AgentError> {
        let n = env.config().image_size;
        let exact = || Mask::square(n, env.latest_frame().mask.clone());
        Ok(match self.mode {
            MaskMode::Exact => env.latest_frame().mask.clone(),
            MaskMode::Preprocessed => {
                let big = n * self.config.render_scale;
                let high = Mask::square(big, render::agent_mask(env.state(), big))?;
                preprocess(&high, n, &self.config)?.data
            }
            MaskMode::Noisy => add_noise(&exact()?, self.config.noise_p, &mut self.rng).data,
            MaskMode::Approximate => approximate(&exact()?, &self.config).data,
            MaskMode::JointPatches => joint_patches(&env.joint_pixels(n), self.config.joint_patch_radius, n, n).data,
        })
    }
}

/// The last `S` learner masks, oldest first.
struct MaskStack {
    frames: VecDeque<Vec<u8>>,
    depth: usize,
}

impl MaskStack {
    fn reset(&mut self, mask: Vec<u8>) {
        self.frames.clear();
        self.frames.extend(std::iter::repeat_n(mask, self.depth));
    }

    fn push(&mut self, mask: Vec<u8>) {
        self.frames.pop_front();
        self.frames.push_back(mask);
    }

    fn flat(&self) -> Vec<u8> {
        self.frames.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

impl EvalResult {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    /// Fraction of episodes in which the task was solved at some step.
    pub fn success_rate(&self) -> f64 {
        self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len().max(1) as f64
    }
}

/// Runs `episodes` episodes with the mean action. The env is rebuilt from
/// `seed`, so every call sees the same episodes.
pub fn evaluate(
    policy: &Policy,
    env_config: &EnvConfig,
    mode: MaskMode,
    masks: &MaskPipelineConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, AgentError> {
    let mut env = Env::new(env_config.clone(), seed)?;
    let mut source = MaskSource::new(mode, masks.clone(), Rng::new(seed).split("eval-masks"));
    let mut stack = MaskStack {
        frames: VecDeque::new(),
        depth: env_config.frame_stack,
    };
    let mut out = EvalResult::default();
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        stack.reset(source.mask(&env)?);
        let (mut ret, mut solved) = (0.0, false);
        while !obs.done {
            let a = policy.act(&obs.frames, &stack.flat())?;
            obs = env.step(a);
            stack.push(source.mask(&env)?);
            ret += obs.reward;
            solved |= obs.success;
        }
        out.returns.push(ret);
        out.successes.push(solved);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    /// `(step, result)` for every evaluation, in step order.
    pub evals: Vec<(u64, EvalResult)>,
    pub final_checkpoint: Option<PathBuf>,
}

fn derived_seed(seed: u64, label: &str) -> u64 {
    let mut r = Rng::new(seed).split(label);
    (r.uniform() * (1u64 << 53) as f64) as u64
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

type PendingEval = (u64, JoinHandle<Result<EvalResult, AgentError>>);

struct Run<'a> {
    cfg: &'a TrainConfig,
    metrics: MetricsWriter,
    wall: MetricsWriter,
    started: Instant,
    summary: TrainSummary,
    pending: Option<PendingEval>,
    eval_seed: u64,
}

impl Run<'_> {
    fn record_eval(&mut self, step: u64, result: EvalResult) -> Result<(), AgentError> {
        self.metrics.write(&MetricsRecord {
            kind: "eval".into(),
            step,
            episode_return: Some(result.mean_return()),
            eval_success: Some(result.success_rate()),
            ..MetricsRecord::default()
        })?;
        self.summary.evals.push((step, result));
        Ok(())
    }

    fn finish_pending(&mut self) -> Result<(), AgentError> {
        if let Some((step, handle)) = self.pending.take() {
            let result = handle
                .join()
                .map_err(|_| AgentError::Numeric("evaluation thread panicked".into()))??;
            self.record_eval(step, result)?;
        }
        Ok(())
    }

    fn eval(&mut self, agent: &Agent, step: u64) -> Result<(), AgentError> {
        self.finish_pending()?;
        let policy = agent.policy();
        let c = self.cfg;
        let (env, mode, masks, episodes, seed) = (
            c.env.clone(),
            c.mask_mode,
            c.masks.clone(),
            c.eval_episodes,
            self.eval_seed,
        );
        if c.eval_thread {
            let handle = std::thread::spawn(move || evaluate(&policy, &env, mode, &masks, episodes, seed));
            self.pending = Some((step, handle));
            Ok(())
        } else {
            let result = evaluate(&policy, &env, mode, &masks, episodes, seed)?;
            self.record_eval(step, result)
        }
    }

    fn tick(&mut self, step: u64) -> Result<(), AgentError> {
        self.wall
            .write(&json!({"step": step, "wall_time": self.started.elapsed().as_secs_f64()}))?;
        Ok(())
    }
}

/// Collects experience and trains `cfg.agent` for `cfg.total_steps` env
/// steps, writing metrics, a run manifest and checkpoints into `out_dir`.
/// Metrics written before a failure stay on disk.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary, AgentError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest = json!({
        "config": cfg,
        "seed": cfg.seed,
        "code_version": code_version(),
    });
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?,
    )?;

    let mut agent = Agent::new(cfg.agent.clone(), cfg.env.clone(), cfg.seed)?;
    let mut run = Run {
        cfg,
        metrics: MetricsWriter::create(&out_dir.join(METRICS_FILE))?,
        wall: MetricsWriter::create(&out_dir.join(WALL_TIME_FILE))?,
        started: Instant::now(),
        summary: TrainSummary::default(),
        pending: None,
        eval_seed: derived_seed(cfg.seed, "eval-env"),
    };
    let result = collect_and_update(&mut agent, &mut run, out_dir);
    // Keep a finished background evaluation even when training failed.
    let pending = run.finish_pending();
    result?;
    pending?;
    let final_dir = out_dir.join(CHECKPOINT_DIR).join("final");
    agent.save(&final_dir, run.summary.steps)?;
    run.summary.final_checkpoint = Some(final_dir);
    Ok(run.summary)
}

fn collect_and_update(agent: &mut Agent, run: &mut Run, out_dir: &Path) -> Result<(), AgentError> {
    let cfg = run.cfg;
    let a = &cfg.agent;
    let root = Rng::new(cfg.seed).split("train");
    let mut explore = root.split("explore");
    let mut act_rng = root.split("act");
    let mut replay_rng = root.split("replay");
    let mut env = Env::new(cfg.env.clone(), derived_seed(cfg.seed, "train-env"))?;
    let mut source = MaskSource::new(cfg.mask_mode, cfg.masks.clone(), root.split("masks"));
    let mut stack = MaskStack {
        frames: VecDeque::new(),
        depth: cfg.env.frame_stack,
    };
    let mut replay = ReplayBuffer::new(a.replay_capacity);

    let begin_episode =
        |env: &mut Env, source: &mut MaskSource, stack: &mut MaskStack, replay: &mut ReplayBuffer, episode: u64| {
            let obs = env.reset()?;
            let mask = source.mask(env)?;
            stack.reset(mask.clone());
            replay.push(Transition {
                frame: env.latest_frame().rgb.clone(),
                mask,
                action: vec![0.0; 2],
                reward: 0.0,
                terminal: false,
                episode_id: episode,
                step_index: 0,
            })?;
            Ok::<_, AgentError>(obs)
        };

    let mut episode = 0u64;
    let mut obs = begin_episode(&mut env, &mut source, &mut stack, &mut replay, episode)?;
    let (mut episode_step, mut episode_return) = (0usize, 0.0f64);
    let mut last_return = None;
    let mut updates = 0u64;
    for step in 0..cfg.total_steps {
        let action = if step < a.exploration_steps {
            [explore.uniform_range(-1.0, 1.0), explore.uniform_range(-1.0, 1.0)]
        } else {
            agent.act(&obs.frames, &stack.flat(), step, false, &mut act_rng)?
        };
        obs = env.step(action);
        episode_step += 1;
        episode_return += obs.reward;
        let mask = source.mask(&env)?;
        stack.push(mask.clone());
        replay.push(Transition {
            frame: env.latest_frame().rgb.clone(),
            mask,
            action: action.iter().map(|&v| v as f32).collect(),
            reward: obs.reward as f32,
            // Episodes end on a time limit, which is not a terminal state.
            terminal: false,
            episode_id: episode,
            step_index: episode_step,
        })?;
        if obs.done {
            run.metrics.write(&MetricsRecord {
                kind: "episode".into(),
                step: step + 1,
                episode_return: Some(episode_return),
                ..MetricsRecord::default()
            })?;
            run.summary.episodes += 1;
            last_return = Some(episode_return);
            episode += 1;
            obs = begin_episode(&mut env, &mut source, &mut stack, &mut replay, episode)?;
            (episode_step, episode_return) = (0, 0.0);
        }

        let done = step + 1;
        let frames = done * cfg.env.action_repeat as u64;
        if frames > a.seed_frames && done % a.update_every == 0 {
            match replay.sample_batch(a.batch_size, a.n_step, cfg.env.frame_stack, a.discount, &mut replay_rng) {
                Ok(batch) => {
                    let report = agent.update(&batch, done)?;
                    if updates % cfg.log_every == 0 {
                        run.metrics.write(&MetricsRecord::update(done, &report, last_return))?;
                    }
                    updates += 1;
                    run.summary.updates = updates;
                }
                Err(ReplayError::NotReady(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        run.summary.steps = done;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            run.eval(agent, done)?;
            run.tick(done)?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            agent.save(&out_dir.join(CHECKPOINT_DIR).join(format!("step_{done}")), done)?;
        }
    }
    Ok(())
}
