//! Test-time reinforcement learning with entropy- and confidence-driven
//! tree rollouts on toy n-gram softmax policies.

// `!(x > 0.0)` is how validation rejects NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod optimizer;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod signals;
pub mod toy;

pub use config::EchoConfig;
pub use error::{EchoError, Result};
pub use policy::{PolicyParams, ReferencePolicy, TokenPolicy};
pub use rollout::{rollout, RolloutConfig, ScheduleMode};
