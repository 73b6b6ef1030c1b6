// SPDX-License-Identifier: Apache-2.0

//! Filter-and-refine adaptive kernel components.
//!
//! Each subsystem follows the same two-phase shape: prune a large space of
//! candidates cheaply, then spend the remaining budget refining survivors.
//!
//! - [`engine`]: simulated-time transactional store with per-operation
//!   lock-or-validate choices.
//! - [`cc_adaptive`]: learned concurrency control tuned online.
//! - [`recovery`]: hash-sealed redo and anchor logs for tamper repair.
//! - [`model_select`]: budgeted model selection, training-free scoring then
//!   successive halving.
//! - [`plan_opt`]: join-plan candidates from mutated cardinalities plus an
//!   online plan selector.
//! - [`gate`]: query-aware sparse gating over a mixture of experts.
//! - [`harness`]: scenario configs, metrics, drivers and the bounded feed.

pub mod cc_adaptive;
pub mod engine;
pub mod gate;
pub mod harness;
pub mod model_select;
pub mod plan_opt;
pub mod recovery;
pub mod rng;

pub use cc_adaptive::{CCStrategy, SystemState};
pub use engine::{CCAction, Engine, EngineConfig, ExecStats, Key, Record, TxnId, TxnOp, WorkloadSpec};
pub use gate::{GateWeights, GatingNet, QueryEncoding, Schema};
pub use harness::{CircularBuffer, Metrics, MetricsRow, ScenarioConfig, ScenarioKind};
pub use model_select::{ModelGenome, ModelSpace, SelectionPlan};
pub use plan_opt::{Catalog, PlanTree};
pub use recovery::{EnclaveSim, RecoveryLog};
