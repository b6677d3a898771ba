//! Reflection rewards, group-relative policy optimization and reward-driven
//! task filtering on a tiny tabular policy.
//!
//! A group of reasoning traces is scored by how certain a scoring policy is
//! of the reference outcome after each trace ([`certainty`]). The spread of
//! that certainty across the group picks out the reference tokens that depend
//! on the reasoning, and the [`r3`] scorers weight those tokens up. The
//! resulting rewards drive [`grpo`] updates in the [`trainer`], and the same
//! statistics prune the task pool in [`filtering`].
//!
//! ```
//! use dro::{find_instance, Variant};
//!
//! let demo = find_instance(0, 0.01)?;
//! assert!(demo.vanilla[1] > demo.vanilla[0]);
//! assert!(demo.weighted[0] > demo.weighted[1]);
//! assert_eq!(Variant::Masked.name(), "masked");
//! # Ok::<(), dro::DroError>(())
//! ```

pub mod certainty;
pub mod config;
pub mod error;
pub mod grpo;
pub mod policy;
pub mod r3;
pub mod rng;
pub mod sequence;
pub mod tasks;
pub mod vocab;
pub mod filtering;
pub mod records;
pub mod trainer;
pub mod demo;
pub mod gradcheck;
pub mod cli;

pub use certainty::{CertaintyMatrix, CertaintyRow};
pub use config::{RewardPolicyMode, TrainConfig};
pub use demo::find_instance;
pub use error::{DroError, Result};
pub use policy::PolicySnapshot;
pub use r3::{ReflectionStats, RewardVector, Variant};
pub use tasks::{Task, TaskKind};
pub use trainer::{run_training, RunState};
pub use vocab::{TokenId, Vocabulary};
