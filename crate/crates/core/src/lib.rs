//! Desk-scale continual-learning laboratory.
//!
//! A miniature frozen dual encoder is adapted to a class-incremental task
//! stream by tuning instance-conditioned visual prompts (and optionally
//! per-class textual prompts) against textual prototype anchors. Everything
//! runs on a built-in reverse-mode autodiff core over dense f64 tensors.

pub mod autodiff;
pub mod config;
pub mod continual;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod objectives;
pub mod prompt_pool;
pub mod seeding;
pub mod synthdata;

pub use error::{Error, Result};
