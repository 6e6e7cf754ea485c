//! Analytic 2D visual control tasks. The agent is a planar two-link arm whose
//! end-effector behaves as a damped point mass; observations are rendered
//! RGB frames together with the exact agent mask.

pub mod render;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;
use crate::pnm::Image;

pub const DAMPING: f64 = 0.8;
pub const GAIN: f64 = 0.1;
pub const ALPHA: f64 = 5.0;
pub const BETA: f64 = 0.5;
pub const MIN_SEPARATION: f64 = 0.15;
pub const PLACEMENT_MARGIN: f64 = 0.05;
pub const PLACEMENT_TRIES: usize = 1000;
pub const REACH_RADIUS: f64 = 0.05;
pub const PUSH_RADIUS: f64 = 0.07;
pub const OBJECT_HALF: f64 = 0.03;
pub const OBSTACLE_RADIUS_RANGE: (f64, f64) = (0.05, 0.1);

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment config error: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reach,
    ReachObstacle,
    Push,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distractor {
    None,
    StaticImage,
    PerEpisodeRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub image_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Episode length in simulator sub-steps.
    pub episode_length: usize,
    pub task: Task,
    pub distractor: Distractor,
    /// Reward 1 on success sub-steps and 0 otherwise.
    pub sparse_reward: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            frame_stack: 3,
            action_repeat: 2,
            episode_length: 100,
            task: Task::Reach,
            distractor: Distractor::None,
            sparse_reward: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.action_repeat == 0 {
            return err("action_repeat must be at least 1".into());
        }
        if self.episode_length == 0 || self.episode_length % self.action_repeat != 0 {
            return err(format!(
                "episode_length {} must be a positive multiple of action_repeat {}",
                self.episode_length, self.action_repeat
            ));
        }
        if self.frame_stack == 0 {
            return err("frame_stack must be at least 1".into());
        }
        if self.image_size < 8 {
            return err(format!("image_size {} is too small", self.image_size));
        }
        Ok(())
    }

    /// Agent decisions per episode.
    pub fn agent_steps(&self) -> usize {
        self.episode_length / self.action_repeat
    }

    pub fn shows_obstacle(&self) -> bool {
        self.task == Task::ReachObstacle
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: [f64; 2],
    pub agent_vel: [f64; 2],
    pub goal_pos: [f64; 2],
    pub obstacle_pos: [f64; 2],
    pub obstacle_radius: f64,
    pub object_pos: Option<[f64; 2]>,
    pub time_step: usize,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Rejection-samples a start configuration with pairwise separation.
pub fn sample_state(task: Task, rng: &mut Rng) -> Result<WorldState, EnvError> {
    let count = if task == Task::Push { 4 } else { 3 };
    let lo = PLACEMENT_MARGIN;
    let hi = 1.0 - PLACEMENT_MARGIN;
    for _ in 0..PLACEMENT_TRIES {
        let pts: Vec<[f64; 2]> = (0..count)
            .map(|_| [rng.uniform_range(lo, hi), rng.uniform_range(lo, hi)])
            .collect();
        let radius = rng.uniform_range(OBSTACLE_RADIUS_RANGE.0, OBSTACLE_RADIUS_RANGE.1);
        let separated = (0..count).all(|i| (i + 1..count).all(|j| dist(pts[i], pts[j]) >= MIN_SEPARATION));
        if separated {
            return Ok(WorldState {
                agent_pos: pts[0],
                agent_vel: [0.0; 2],
                goal_pos: pts[1],
                obstacle_pos: pts[2],
                obstacle_radius: radius,
                object_pos: pts.get(3).copied(),
                time_step: 0,
            });
        }
    }
    Err(EnvError::Config(format!(
        "could not place objects {MIN_SEPARATION} apart in {PLACEMENT_TRIES} tries"
    )))
}

pub fn success(state: &WorldState, task: Task) -> bool {
    match (task, state.object_pos) {
        (Task::Push, Some(o)) => dist(o, state.goal_pos) < PUSH_RADIUS,
        _ => dist(state.agent_pos, state.goal_pos) < REACH_RADIUS,
    }
}

/// Reward for a single simulator sub-step.
pub fn reward(state: &WorldState, task: Task, sparse: bool) -> f64 {
    if sparse {
        return if success(state, task) { 1.0 } else { 0.0 };
    }
    let mut r = (-ALPHA * dist(state.agent_pos, state.goal_pos)).exp();
    match task {
        Task::Reach => {}
        Task::ReachObstacle => {
            r -= BETA * (-dist(state.agent_pos, state.obstacle_pos) / state.obstacle_radius).exp();
        }
        Task::Push => {
            if let Some(o) = state.object_pos {
                r += (-ALPHA * dist(o, state.goal_pos)).exp();
            }
        }
    }
    r
}

/// One simulator sub-step of the damped point mass (and object contact).
pub fn integrate(state: &mut WorldState, action: [f64; 2]) {
    for k in 0..2 {
        let a = action[k].clamp(-1.0, 1.0);
        state.agent_vel[k] = DAMPING * state.agent_vel[k] + GAIN * a;
        state.agent_pos[k] = (state.agent_pos[k] + state.agent_vel[k]).clamp(0.0, 1.0);
    }
    if let Some(o) = state.object_pos.as_mut() {
        // Disc-on-disc contact: the object is pushed out until just touching.
        let reach = render::EFFECTOR_RADIUS + OBJECT_HALF;
        let d = dist(*o, state.agent_pos);
        if d < reach {
            let (dx, dy) = if d > 1e-12 {
                ((o[0] - state.agent_pos[0]) / d, (o[1] - state.agent_pos[1]) / d)
            } else {
                (1.0, 0.0)
            };
            o[0] = (state.agent_pos[0] + dx * reach).clamp(0.0, 1.0);
            o[1] = (state.agent_pos[1] + dy * reach).clamp(0.0, 1.0);
        }
    }
    state.time_step += 1;
}

/// Stacked observation, oldest frame first.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Planar `[3·S, H, W]` pixels.
    pub frames: Vec<u8>,
    /// `[S, H, W]`, each pixel 0 or 1.
    pub masks: Vec<u8>,
    /// End-effector position then velocity.
    pub proprio: [f64; 4],
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

impl Observation {
    /// Frames scaled to `[0, 1]`.
    pub fn frames_unit(&self) -> Vec<f32> {
        self.frames.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

/// One rendered frame and its agent mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
}

pub struct Env {
    config: EnvConfig,
    rng: Rng,
    state: WorldState,
    background: Vec<u8>,
    stack: VecDeque<Frame>,
    episode: u64,
}

impl Env {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let rng = Rng::new(seed);
        let background = match config.distractor {
            Distractor::StaticImage => render::blob_background(config.image_size, &mut rng.split("background")),
            _ => render::plain_background(config.image_size),
        };
        let state = sample_state(config.task, &mut rng.split("probe"))?;
        Ok(Self {
            config,
            rng,
            state,
            background,
            stack: VecDeque::new(),
            episode: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn background(&self) -> &[u8] {
        &self.background
    }

    /// Episodes started so far.
    pub fn episodes(&self) -> u64 {
        self.episode
    }

    pub fn latest_frame(&self) -> &Frame {
        self.stack.back().expect("reset must be called before stepping")
    }

    pub fn reset(&mut self) -> Result<Observation, EnvError> {
        let mut ep_rng = self.rng.split_index("episode", self.episode);
        self.episode += 1;
        self.state = sample_state(self.config.task, &mut ep_rng)?;
        if self.config.distractor == Distractor::PerEpisodeRandom {
            self.background = render::blob_background(self.config.image_size, &mut ep_rng);
        }
        let frame = self.render_frame();
        self.stack.clear();
        for _ in 0..self.config.frame_stack {
            self.stack.push_back(frame.clone());
        }
        Ok(self.observation(0.0, false))
    }

    /// Repeats `action` for `action_repeat` sub-steps, summing the rewards.
    pub fn step(&mut self, action: [f64; 2]) -> Observation {
        let mut total = 0.0;
        let mut hit = false;
        for _ in 0..self.config.action_repeat {
            integrate(&mut self.state, action);
            total += reward(&self.state, self.config.task, self.config.sparse_reward);
            hit |= success(&self.state, self.config.task);
        }
        let frame = self.render_frame();
        self.stack.pop_front();
        self.stack.push_back(frame);
        let done = self.state.time_step >= self.config.episode_length;
        let mut obs = self.observation(total, done);
        obs.success |= hit;
        obs
    }

    pub fn render_frame(&self) -> Frame {
        let (rgb, mask) = render::render(
            &self.state,
            self.config.image_size,
            &self.background,
            self.config.shows_obstacle(),
        );
        Frame { rgb, mask }
    }

    /// Joint positions in pixel coordinates `(row, col)` at `size`.
    pub fn joint_pixels(&self, size: usize) -> Vec<(usize, usize)> {
        joint_pixels(&self.state, size)
    }

    fn observation(&self, reward: f64, done: bool) -> Observation {
        let mut frames = Vec::with_capacity(self.stack.len() * 3 * self.config.image_size.pow(2));
        let mut masks = Vec::with_capacity(self.stack.len() * self.config.image_size.pow(2));
        for f in &self.stack {
            frames.extend_from_slice(&f.rgb);
            masks.extend_from_slice(&f.mask);
        }
        let s = &self.state;
        Observation {
            frames,
            masks,
            proprio: [s.agent_pos[0], s.agent_pos[1], s.agent_vel[0], s.agent_vel[1]],
            reward,
            done,
            success: success(s, self.config.task),
        }
    }

    /// Writes the newest frame as PPM and its mask as PGM (0/255).
    pub fn dump_latest(&self, rgb_path: &std::path::Path, mask_path: &std::path::Path) -> std::io::Result<()> {
        let n = self.config.image_size;
        let f = self.latest_frame();
        Image::from_planar_rgb(n, n, &f.rgb).save(rgb_path)?;
        Image::gray(n, n, f.mask.iter().map(|&m| m * 255).collect()).save(mask_path)
    }
}

pub fn joint_pixels(state: &WorldState, size: usize) -> Vec<(usize, usize)> {
    let s = size as f64;
    render::joints(state)
        .iter()
        .map(|p| {
            let col = (p[0] * s).floor().clamp(0.0, s - 1.0) as usize;
            let row = (p[1] * s).floor().clamp(0.0, s - 1.0) as usize;
            (row, col)
        })
        .collect()
}
