//! Operational surface: configuration, persistence, the training pipeline,
//! evaluation and offline reward checking.

pub mod checkpoint;
pub mod config;
pub mod lock;
pub mod pipeline;
pub mod reward_check;
