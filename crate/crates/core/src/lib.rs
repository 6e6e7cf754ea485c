//! Visual reinforcement learning with structured agent/environment latents.
//!
//! The encoder's latent is split positionally into an agent half, trained to
//! predict the agent mask, and an environment half, trained to reconstruct
//! the image. Everything runs on a small from-scratch autodiff core.

pub mod agents;
pub mod envs;
pub mod masktools;
pub mod nets;
pub mod numerics;
pub mod pnm;
pub mod replay;
pub mod toylab;
