//! Training machinery for a reasoning-style AI-generated image detector:
//! structured verdict parsing, rule-based rewards, expert agents, GRPO, and
//! a differentiable toy policy that stands in for the language model.
//!
//! The crate is organized bottom-up:
//!
//! - [`verdict`]: the think/answer/JSON output format and its post-processing.
//! - [`reward`]: the four rule-based rewards and their weighted sum.
//! - [`agents`]: expert detectors whose probabilities calibrate the agentic reward.
//! - [`dataset`]: labeled instances and the synthetic world that generates them.
//! - [`policy`]: the toy structured-emission policy and its cold-start fit.
//! - [`grpo`]: advantages, clipped surrogate, k3 KL, the update and training loop.
//! - [`harness`]: config, checkpoints, the two-stage pipeline and CLI commands.

pub mod agents;
pub mod dataset;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod verdict;
