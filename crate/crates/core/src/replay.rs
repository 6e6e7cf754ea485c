//! Experience replay that stores every rendered frame once and rebuilds
//! frame stacks and n-step windows when sampling.
//!
//! Entry `t` of an episode holds the frame `x_t`, its mask, and the action and
//! reward that led *into* it (zeros for the first frame). A window starting
//! at `x_t` therefore uses actions/rewards from entries `t+1 ..= t+n`.

use std::collections::VecDeque;

use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    /// No complete window is stored yet; collect more and retry.
    #[error("replay buffer not ready: no valid {0}-step window stored")]
    NotReady(usize),
    #[error("invalid transition: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Planar `[3, H, W]` pixels of a single frame.
    pub frame: Vec<u8>,
    /// `[H, W]` of 0/1.
    pub mask: Vec<u8>,
    pub action: Vec<f32>,
    pub reward: f32,
    /// The episode terminated at this frame: bootstrapping stops here.
    pub terminal: bool,
    pub episode_id: u64,
    pub step_index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub size: usize,
    /// `[B, 3S, H, W]`
    pub obs: Vec<u8>,
    /// `[B, S, H, W]`
    pub masks: Vec<u8>,
    /// `[B, A]`
    pub actions: Vec<f32>,
    /// Discounted n-step reward sums.
    pub returns: Vec<f32>,
    /// `γ^n`, or 0 where the window hit a terminal frame.
    pub discounts: Vec<f32>,
    pub next_obs: Vec<u8>,
    pub next_masks: Vec<u8>,
    /// Global sequence number of each window's first frame.
    pub starts: Vec<u64>,
}

/// One sampled window before it is packed into a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub obs: Vec<u8>,
    pub masks: Vec<u8>,
    pub action: Vec<f32>,
    pub n_step_return: f64,
    pub discount: f64,
    pub next_obs: Vec<u8>,
    pub next_masks: Vec<u8>,
}

pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    /// Sequence number of `items[0]`; increases by one per push.
    first_seq: u64,
    frame_len: usize,
    mask_len: usize,
    action_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            first_seq: 0,
            frame_len: 0,
            mask_len: 0,
            action_dim: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sequence number the next push will receive.
    pub fn next_seq(&self) -> u64 {
        self.first_seq + self.items.len() as u64
    }

    pub fn get(&self, seq: u64) -> Option<&Transition> {
        seq.checked_sub(self.first_seq).and_then(|i| self.items.get(i as usize))
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        if self.items.is_empty() && self.first_seq == 0 {
            self.frame_len = t.frame.len();
            self.mask_len = t.mask.len();
            self.action_dim = t.action.len();
        }
        if t.frame.len() != self.frame_len || t.mask.len() != self.mask_len || t.action.len() != self.action_dim {
            return Err(ReplayError::Invalid(format!(
                "sizes frame {} mask {} action {} differ from the first transition",
                t.frame.len(),
                t.mask.len(),
                t.action.len()
            )));
        }
        if self.frame_len != 3 * self.mask_len {
            return Err(ReplayError::Invalid(
                "frame must hold three planes of the mask size".into(),
            ));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.first_seq += 1;
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Length of the window starting at `seq`: `n`, or fewer when a terminal
    /// frame cuts it short. `None` when the window is not fully stored,
    /// crosses an episode boundary, or its stacks need evicted frames.
    fn window_len(&self, seq: u64, n: usize, stack: usize) -> Option<usize> {
        let start = self.get(seq)?;
        if start.terminal {
            return None;
        }
        // Frame stacks reach back to the episode's first frame at most.
        let back = start.step_index.min(stack.saturating_sub(1)) as u64;
        if seq - back < self.first_seq {
            return None;
        }
        for k in 1..=n {
            let t = self.get(seq + k as u64)?;
            if t.episode_id != start.episode_id || t.step_index != start.step_index + k {
                return None;
            }
            if t.terminal {
                return Some(k);
            }
        }
        Some(n)
    }

    pub fn is_valid_start(&self, seq: u64, n: usize, stack: usize) -> bool {
        self.window_len(seq, n, stack).is_some()
    }

    /// Frames `x_{t-S+1} .. x_t`, padding with the episode's first frame.
    fn stack(&self, seq: u64, stack: usize, out_frames: &mut Vec<u8>, out_masks: &mut Vec<u8>) {
        let step = self.get(seq).expect("stacked frame is stored").step_index as u64;
        for back in (0..stack as u64).rev() {
            let t = self.get(seq - back.min(step)).expect("stacked frame is stored");
            out_frames.extend_from_slice(&t.frame);
            out_masks.extend_from_slice(&t.mask);
        }
    }

    pub fn window(&self, seq: u64, n: usize, stack: usize, discount: f64) -> Option<Window> {
        let len = self.window_len(seq, n, stack)?;
        let (mut obs, mut masks) = (Vec::new(), Vec::new());
        self.stack(seq, stack, &mut obs, &mut masks);
        let (mut next_obs, mut next_masks) = (Vec::new(), Vec::new());
        self.stack(seq + len as u64, stack, &mut next_obs, &mut next_masks);
        let mut ret = 0.0;
        let mut scale = 1.0;
        for k in 1..=len {
            ret += scale * self.get(seq + k as u64)?.reward as f64;
            scale *= discount;
        }
        let terminal = self.get(seq + len as u64)?.terminal;
        Some(Window {
            obs,
            masks,
            action: self.get(seq + 1)?.action.clone(),
            n_step_return: ret,
            discount: if terminal { 0.0 } else { scale },
            next_obs,
            next_masks,
        })
    }

    /// Uniformly random valid window start. Rejection sampling keeps the
    /// distribution exactly uniform over valid starts.
    pub fn sample_start(&self, n: usize, stack: usize, rng: &mut Rng) -> Result<u64, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::NotReady(n));
        }
        for _ in 0..64 {
            let seq = self.first_seq + rng.below(self.items.len()) as u64;
            if self.is_valid_start(seq, n, stack) {
                return Ok(seq);
            }
        }
        // Mostly-invalid buffer: fall back to an exact scan.
        let valid: Vec<u64> = (self.first_seq..self.next_seq())
            .filter(|&s| self.is_valid_start(s, n, stack))
            .collect();
        if valid.is_empty() {
            return Err(ReplayError::NotReady(n));
        }
        Ok(valid[rng.below(valid.len())])
    }

    pub fn sample_batch(
        &self,
        batch: usize,
        n: usize,
        stack: usize,
        discount: f64,
        rng: &mut Rng,
    ) -> Result<Batch, ReplayError> {
        let mut out = Batch {
            size: batch,
            ..Batch::default()
        };
        for _ in 0..batch {
            let seq = self.sample_start(n, stack, rng)?;
            let w = self.window(seq, n, stack, discount).expect("sampled start is valid");
            out.obs.extend_from_slice(&w.obs);
            out.masks.extend_from_slice(&w.masks);
            out.actions.extend_from_slice(&w.action);
            out.returns.push(w.n_step_return as f32);
            out.discounts.push(w.discount as f32);
            out.next_obs.extend_from_slice(&w.next_obs);
            out.next_masks.extend_from_slice(&w.next_masks);
            out.starts.push(seq);
        }
        Ok(out)
    }
}
