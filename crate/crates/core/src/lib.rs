//! Mask-progressive distillation for tiny decoder-only transformers.
//!
//! A large teacher is temporarily masked by per-layer weight magnitude and
//! progressively restored while a small student is trained on pre-generated
//! multi-response data with a joint Jensen-Shannon distillation and
//! group-relative policy objective. Rewards combine a judge verdict with a
//! normalized teacher/student divergence.
//!
//! Module map:
//! - [`model`]: transformer forward/backward and parameter enumeration
//! - [`checkpoint`]: binary container for parameters and mask plans
//! - [`masking`]: magnitude masks with per-layer thresholds
//! - [`schedule`]: staged mask ratios and the teacher curriculum
//! - [`tasks`]: synthetic tasks, vocabulary and evaluation
//! - [`judge`]: accuracy judges and prompt templates
//! - [`rollout`]: sampling and the offline response store
//! - [`objectives`]: divergences, rewards, advantages and losses
//! - [`trainer`]: optimizer and training loop
//! - [`config`]: run configuration
//! - [`pipeline`]: file-level orchestration used by the command line

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod judge;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rollout;
pub mod schedule;
pub mod seeding;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
