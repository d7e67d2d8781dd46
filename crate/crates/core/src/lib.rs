//! Decentralized two-agent world models that learn to exchange messages.
//!
//! The crate covers the whole experimental pipeline: the two-agent
//! trajectory-drawing environment and its expert data ([`environment`]), the
//! per-agent recurrent world model ([`model`]) built on a small autodiff
//! tape ([`tape`]), training under four conditions ([`training`]), the
//! windowed message-selection runtime ([`runtime`]), the coordination and
//! message-structure metrics ([`metrics`], [`evaluation`]) and experiment
//! orchestration ([`plan`]).

pub mod environment;
pub mod evaluation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod plan;
pub mod runtime;
pub mod tape;
pub mod training;

pub use environment::{Agent, Bins, Dataset, EnvConfig, EnvState, EpisodeRecord, Vec2};
pub use error::{Error, Result};
pub use model::{AgentModel, JointModel, ModelConfig};
pub use tape::{Real, Tape, Var};
