//! Collaborative split federated learning (C-SFL).
//!
//! The model is split in three: a weak-side segment trained by every client,
//! an aggregator-side segment trained by a few stronger clients that also
//! average it every epoch, and a server-side segment. This crate provides
//! the analytical round-delay and communication models, an exhaustive
//! planner for the two split points, and a small deterministic training
//! engine that runs SplitFed, LocSplitFed and C-SFL side by side.

pub mod config;
pub mod data;
pub mod delay;
pub mod engine;
pub mod error;
pub mod overhead;
pub mod planner;
pub mod profiles;
pub mod protocol;
pub mod scheme;

pub use delay::{round_delay, DelayBreakdown};
pub use engine::{AuxHead, Batch, Matrix, NetSpec, ParamSet};
pub use error::{Error, Result};
pub use overhead::{OverheadMode, OverheadReport};
pub use planner::{enumerate_splits, plan, plan_with, PlanResult};
pub use profiles::{ClientId, ClientSpec, Entity, FleetSpec, LayerProfile, ModelProfile, RateMap, Role, SplitConfig};
pub use protocol::{simulate, RoundTrace, SchemeConfig};
pub use scheme::Scheme;
