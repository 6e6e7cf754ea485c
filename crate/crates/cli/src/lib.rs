//! Library half of the `sear` binary: configuration, subcommands and the
//! small image tools they use.

pub mod activations;
pub mod commands;
pub mod config;
pub mod plot;

use sear_core::agents::AgentError;
use sear_core::envs::EnvError;
use sear_core::masktools::MaskError;
use sear_core::toylab::ToyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("environment failure: {0}")]
    Env(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Env(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(m) => Self::Config(m),
            AgentError::Numeric(m) => Self::Numeric(m),
            AgentError::Env(e) => Self::Env(e.to_string()),
            AgentError::Io(e) => Self::Io(e),
        }
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::Config(m) => Self::Config(m),
            other => Self::Numeric(other.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        Self::Env(e.to_string())
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        Self::Config(e.to_string())
    }
}
