//! Simulated resident-base trainers.
//!
//! One trainer keeps its base allocation and a max-shape adapter slot for its
//! whole life. Policies take turns on it by swapping their full training
//! state in and out; smaller adapters are padded into the slot and the
//! inactive rows stay zero.

mod export;
mod schedule;
mod worker;

pub use export::{export_from_shards, shard_adapter, ExportedAdapter, FragmentKind, ShardedAdapterView, TensorFragment};
pub use schedule::{
    reference_plans, simulate_schedule, Occupancy, Phase, PhaseKind, PhasePlan, Resources, ScheduleMode, Span, Timeline,
};
pub use worker::{Blob, StateComponent, StateDigests, SwitchReport, TrainerWorker, TrainingState};

use alloc::string::String;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TrainerError {
    #[error("state of policy {policy} failed digest check on {component:?}")]
    StateDigestMismatch { policy: String, component: StateComponent },
    #[error("session violation: {0}")]
    SessionViolation(String),
    #[error("no active session for the given token")]
    NoSession,
    #[error("adapter shape of {0} does not fit the worker slot")]
    ShapeExceedsSlot(String),
    #[error("missing slice of tensor `{0}`")]
    MissingSlice(String),
    #[error("expert {expert} of tensor `{tensor}` is owned by more than one rank")]
    OverlappingOwnership { tensor: String, expert: u32 },
    #[error("replicated copies of `{0}` differ")]
    ReplicaDivergence(String),
}

impl TrainerError {
    pub fn code(&self) -> &'static str {
        match self {
            TrainerError::StateDigestMismatch { .. } => "state_digest_mismatch",
            TrainerError::SessionViolation(_) => "session_violation",
            TrainerError::NoSession => "no_session",
            TrainerError::ShapeExceedsSlot(_) => "shape_exceeds_slot",
            TrainerError::MissingSlice(_) => "missing_slice",
            TrainerError::OverlappingOwnership { .. } => "overlapping_ownership",
            TrainerError::ReplicaDivergence(_) => "replica_divergence",
        }
    }
}
