//! Serving actor simulation.
//!
//! One actor owns a GPU batch window, a CPU adapter cache and a single-flight
//! cold loader. Time advances on a 1 ms simulated clock. Cold activations and
//! batch formation share one exclusive engine lock, so load slices admitted in
//! a round delay the decode step that follows them.

mod actor;
mod cache;
mod loader;

pub use actor::{BatchRecord, EngineStats, PrewarmReport, Route, ServingActor, SimOutput};
pub use cache::CpuCache;
pub use loader::{ColdLoader, Enqueued, LoadJob, LoadState};

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::lifecycle::{AdapterRevision, Incompatibility};
use crate::Millis;

pub type RequestId = u64;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ServeError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("unknown revision `{0}`")]
    UnknownRevision(String),
    #[error("revision `{revision}` is incompatible: {reason}")]
    IncompatibleRevision { revision: String, reason: Incompatibility },
    #[error("revision `{0}` is not ready on this actor")]
    NotReady(String),
    #[error("cold load of `{revision}` rejected; retry after {retry_after_ms} ms")]
    ColdLoadRejected { revision: String, retry_after_ms: Millis },
    #[error("adapter `{revision}` ({bytes} B) exceeds CPU cache capacity {max_bytes} B")]
    CapacityImpossible { revision: String, bytes: u64, max_bytes: u64 },
    #[error("no evictable CPU cache entry for `{0}`")]
    CacheFull(String),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::InvalidConfig(_) => "invalid_config",
            ServeError::UnknownPolicy(_) => "unknown_policy",
            ServeError::UnknownRevision(_) => "unknown_revision",
            ServeError::IncompatibleRevision { .. } => "incompatible_revision",
            ServeError::NotReady(_) => "not_ready",
            ServeError::ColdLoadRejected { .. } => "cold_load_rejected",
            ServeError::CapacityImpossible { .. } => "capacity_impossible",
            ServeError::CacheFull(_) => "cache_full",
        }
    }

    pub fn retryable(&self) -> bool {
        matches!(self, ServeError::NotReady(_) | ServeError::ColdLoadRejected { .. } | ServeError::CacheFull(_))
    }
}

/// Cost of one cold load and of decode work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub fetch_ms: Millis,
    pub build_ms: Millis,
    pub register_ms: Millis,
    pub activate_ms: Millis,
    /// Added to a decode step once per request that joins it.
    pub prefill_ms: Millis,
    /// One decode step produces one token for every running request.
    pub decode_ms: Millis,
}

impl LatencyModel {
    pub fn load_slice_ms(&self) -> Millis {
        self.fetch_ms + self.build_ms + self.register_ms + self.activate_ms
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { fetch_ms: 120, build_ms: 600, register_ms: 240, activate_ms: 400, prefill_ms: 50, decode_ms: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdmissionPolicy {
    /// Every admitted load activates before the next decode step.
    Unlimited,
    Fixed { cap: usize },
    /// Additive-increase, multiplicative-decrease on the oldest runnable wait.
    Adaptive { min_cap: usize, max_cap: usize, target_wait_ms: Millis },
}

impl Default for AdmissionPolicy {
    fn default() -> Self {
        AdmissionPolicy::Fixed { cap: 1 }
    }
}

/// What the engine knows at the start of a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundObservation {
    pub now: Millis,
    pub runnable: usize,
    pub pending_activations: usize,
    pub oldest_runnable_wait_ms: Millis,
}

/// Decides how many cold activations may hold the engine lock in one round.
pub trait AdmissionControl {
    fn round_cap(&mut self, obs: &RoundObservation) -> usize;
}

struct UnlimitedCap;

impl AdmissionControl for UnlimitedCap {
    fn round_cap(&mut self, _: &RoundObservation) -> usize {
        usize::MAX
    }
}

struct FixedCap(usize);

impl AdmissionControl for FixedCap {
    fn round_cap(&mut self, _: &RoundObservation) -> usize {
        self.0
    }
}

struct AdaptiveCap {
    current: usize,
    min: usize,
    max: usize,
    target: Millis,
}

impl AdmissionControl for AdaptiveCap {
    fn round_cap(&mut self, obs: &RoundObservation) -> usize {
        if obs.oldest_runnable_wait_ms > self.target {
            self.current = (self.current / 2).max(self.min);
        } else if obs.oldest_runnable_wait_ms * 2 < self.target && obs.pending_activations > self.current {
            self.current = (self.current + 1).min(self.max);
        }
        self.current
    }
}

impl AdmissionPolicy {
    pub fn build(self) -> Box<dyn AdmissionControl> {
        match self {
            AdmissionPolicy::Unlimited => Box::new(UnlimitedCap),
            AdmissionPolicy::Fixed { cap } => Box::new(FixedCap(cap.max(1))),
            AdmissionPolicy::Adaptive { min_cap, max_cap, target_wait_ms } => {
                let min = min_cap.max(1);
                Box::new(AdaptiveCap { current: min, min, max: max_cap.max(min), target: target_wait_ms })
            }
        }
    }
}

/// Client-side retry of retryable rejections. Each retry is a new request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub backoff_ms: Millis,
    pub max_attempts: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientModel {
    /// Arrivals never wait on completions.
    #[default]
    OpenLoop,
    /// `concurrency` clients; each issues its next request when the previous ends.
    ClosedLoop { concurrency: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub actor_id: String,
    pub base_id: String,
    pub gpu_slots: usize,
    pub cpu_entries: usize,
    pub cpu_bytes: u64,
    pub default_adapter_bytes: u64,
    pub max_inflight: usize,
    pub queue_depth: usize,
    pub latency: LatencyModel,
    pub max_batch_requests: usize,
    pub output_tokens: u32,
    pub prompt_tokens: u32,
    /// Two-phase gating: user traffic only selects ready revisions.
    pub gating: bool,
    pub admission: AdmissionPolicy,
    pub slo_ms: Millis,
    pub stall_ms: Millis,
    pub reject_backoff_ms: Millis,
    pub prewarm_backoff_ms: Millis,
    pub prewarm_backoff_cap_ms: Millis,
    pub retry: Option<RetryPolicy>,
    pub client: ClientModel,
    /// Measured fetch times that replace `latency.fetch_ms` per revision.
    pub fetch_override_ms: BTreeMap<String, Millis>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            actor_id: "actor-0".into(),
            base_id: "base".into(),
            gpu_slots: 64,
            cpu_entries: 512,
            cpu_bytes: 64 << 30,
            default_adapter_bytes: 16 << 20,
            max_inflight: 1,
            queue_depth: 64,
            latency: LatencyModel::default(),
            max_batch_requests: 256,
            output_tokens: 64,
            prompt_tokens: 1024,
            gating: false,
            admission: AdmissionPolicy::default(),
            slo_ms: 5_000,
            stall_ms: 20_000,
            reject_backoff_ms: 1_000,
            prewarm_backoff_ms: 500,
            prewarm_backoff_cap_ms: 10_000,
            retry: None,
            client: ClientModel::OpenLoop,
            fetch_override_ms: BTreeMap::new(),
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), ServeError> {
        let bad = |m: &str| Err(ServeError::InvalidConfig(m.into()));
        if self.gpu_slots == 0 {
            return bad("gpu_slots must be positive");
        }
        if self.max_batch_requests == 0 {
            return bad("max_batch_requests must be positive");
        }
        if self.max_inflight == 0 {
            return bad("max_inflight must be positive");
        }
        if self.latency.decode_ms == 0 && self.latency.prefill_ms == 0 {
            return bad("a decode step must take at least one tick");
        }
        if let ClientModel::ClosedLoop { concurrency: 0 } = self.client {
            return bad("closed-loop concurrency must be positive");
        }
        Ok(())
    }
}

/// An adapter revision known to the actor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionSpec {
    pub revision_id: String,
    pub policy: String,
    #[serde(default)]
    pub bytes: Option<u64>,
    #[serde(default)]
    pub registered_at_ms: Millis,
    /// Resident in the CPU cache and ready at time zero.
    #[serde(default)]
    pub warm: bool,
    /// Full record, when compatibility should be checked.
    #[serde(default)]
    pub adapter: Option<AdapterRevision>,
}

impl RevisionSpec {
    pub fn new(revision_id: impl Into<String>, policy: impl Into<String>) -> Self {
        Self { revision_id: revision_id.into(), policy: policy.into(), bytes: None, registered_at_ms: 0, warm: false, adapter: None }
    }

    pub fn warm(mut self) -> Self {
        self.warm = true;
        self
    }

    pub fn registered_at(mut self, at: Millis) -> Self {
        self.registered_at_ms = at;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Latest eligible revision of the policy.
    Policy(String),
    Revision(String),
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::Policy(s) | Target::Revision(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub target: Target,
    pub arrival_ms: Millis,
    /// Free-form label used to split metrics, e.g. "warm" or "new".
    #[serde(default)]
    pub cohort: String,
    #[serde(default)]
    pub output_tokens: Option<u32>,
}

impl Request {
    pub fn new(id: RequestId, target: Target, arrival_ms: Millis) -> Self {
        Self { id, target, arrival_ms, cohort: String::new(), output_tokens: None }
    }

    pub fn cohort(mut self, cohort: impl Into<String>) -> Self {
        self.cohort = cohort.into();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracePath {
    GpuHit,
    CpuPromote,
    ColdLoad,
    ReadyPath,
    Rejected,
}

impl TracePath {
    pub fn as_str(self) -> &'static str {
        match self {
            TracePath::GpuHit => "gpu_hit",
            TracePath::CpuPromote => "cpu_promote",
            TracePath::ColdLoad => "cold_load",
            TracePath::ReadyPath => "ready_path",
            TracePath::Rejected => "rejected",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub request_id: RequestId,
    /// Id of the first attempt this request retries.
    pub origin_id: RequestId,
    pub attempt: u32,
    pub policy: String,
    pub revision_id: Option<String>,
    pub cohort: String,
    pub arrival_ms: Millis,
    pub path: TracePath,
    pub ttft_ms: Millis,
    pub e2e_ms: Millis,
    pub load_ms: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_code: Option<String>,
}

/// A complete simulated scenario.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub config: ServeConfig,
    pub revisions: Vec<RevisionSpec>,
    pub prewarm_at_ms: Option<Millis>,
    pub prewarm: Vec<String>,
    pub requests: Vec<Request>,
}

/// Runs a scenario to completion. Same input, same output.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, ServeError> {
    let mut actor = ServingActor::new(scenario.config.clone(), &scenario.revisions)?;
    if let Some(at) = scenario.prewarm_at_ms {
        actor.schedule_prewarm(at, scenario.prewarm.clone())?;
    }
    actor.submit_all(scenario.requests.iter().cloned())?;
    actor.run_to_completion();
    Ok(actor.into_output())
}

pub fn traces_to_csv(traces: &[RequestTrace]) -> String {
    let mut out = String::from("request_id,policy,arrival_ms,path,ttft_ms,e2e_ms,load_ms\n");
    for t in traces {
        out.push_str(&alloc::format!(
            "{},{},{},{},{},{},{}\n",
            t.request_id,
            t.policy,
            t.arrival_ms,
            t.path.as_str(),
            t.ttft_ms,
            t.e2e_ms,
            t.load_ms
        ));
    }
    out
}
