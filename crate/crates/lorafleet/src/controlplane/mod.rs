//! Operation queue, worker registry and admission.
//!
//! Clients submit operations and poll their ids. A single assigner (`tick`)
//! moves queued work onto compatible workers. Work assigned in one tick runs
//! at the start of the next, which frees the worker again. Results are
//! committed to the metastore before the status flips to `committed`.

pub mod http;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use lorafleet_core::lifecycle::{
    ActivationProof, ActorDescriptor, AdapterShape, CorrectionPolicy, LifecycleError, ReadinessState, ShapeLimits,
};
use lorafleet_core::packfmt::{audit_packed, LayoutParams, PackedFile, SyntheticAdapter};
use lorafleet_core::trainersim::{TrainerError, TrainerWorker};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::lifecycle::{PolicyService, ServiceError};
use crate::metastore::{EntryKind, Metastore, StoreError};

/// Default idle time before a worker may be evicted.
pub const DEFAULT_IDLE_THRESHOLD_MS: u64 = 300_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    CreatePolicy,
    TrainStep,
    Export,
    Sample,
    RegisterAdapters,
    Generate,
    Audit,
}

impl OpKind {
    /// Worker role that executes the op; `None` runs on the service itself.
    pub fn role(self) -> Option<Role> {
        match self {
            OpKind::CreatePolicy | OpKind::Audit => None,
            OpKind::TrainStep | OpKind::Export => Some(Role::Trainer),
            OpKind::Sample | OpKind::RegisterAdapters | OpKind::Generate => Some(Role::Sampler),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpStatus {
    Queued,
    Running,
    Committed,
    Failed,
    Rejected,
}

impl OpStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, OpStatus::Committed | OpStatus::Failed | OpStatus::Rejected)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Trainer,
    Sampler,
}

/// Queue discipline is FIFO within one (base, role) class.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueClass {
    pub base_id: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceOp {
    pub op_id: String,
    pub kind: OpKind,
    pub payload: Value,
    pub status: OpStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    #[serde(skip)]
    pub class: Option<QueueClass>,
    #[serde(skip)]
    pub shape: Option<AdapterShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_worker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    /// Seq of the committed op_result entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_ref: Option<u64>,
    pub submitted_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("invalid payload for {kind:?}: {message}")]
    SchemaInvalid { kind: Option<OpKind>, message: String },
    #[error("unknown op {0}")]
    UnknownOp(String),
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("idempotency key {key} already names op {op_id} of a different kind")]
    IdempotencyConflict { key: String, op_id: String },
    #[error("no registered {role:?} worker for base {base_id} admits rank {rank} on {modules:?}")]
    NoCompatibleWorkerClass { base_id: String, role: Role, rank: u32, modules: Vec<String> },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

impl ControlError {
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::SchemaInvalid { .. } => "schema_invalid",
            ControlError::UnknownOp(_) => "unknown_op",
            ControlError::UnknownWorker(_) => "unknown_worker",
            ControlError::UnknownPolicy(_) => "unknown_policy",
            ControlError::IdempotencyConflict { .. } => "idempotency_conflict",
            ControlError::NoCompatibleWorkerClass { .. } => "no_compatible_worker_class",
            ControlError::Service(e) => e.code(),
            ControlError::Store(e) => e.code(),
            ControlError::Trainer(e) => e.code(),
        }
    }

    pub fn retryable(&self) -> bool {
        matches!(
            self,
            ControlError::Service(ServiceError::Lifecycle(LifecycleError::SessionHeld { .. }))
                | ControlError::Store(StoreError::Io { .. })
        )
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code().to_string(), message: self.to_string(), retryable: self.retryable() }
    }
}

fn default_one() -> u32 {
    1
}

fn default_samples() -> usize {
    16
}

fn default_output_tokens() -> u32 {
    64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreatePolicyPayload {
    pub base_id: String,
    pub rank: u32,
    pub target_modules: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStepPayload {
    pub policy_id: String,
    #[serde(default = "default_one")]
    pub steps: u32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportPayload {
    pub policy_id: String,
    pub step: u64,
    #[serde(default)]
    pub layout: Option<LayoutParams>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePayload {
    pub policy_id: String,
    #[serde(default)]
    pub revision_id: Option<String>,
    pub token_count: u32,
    #[serde(default)]
    pub route_metadata: Vec<Option<Vec<u32>>>,
    #[serde(default = "no_correction")]
    pub correction_policy: CorrectionPolicy,
}

fn no_correction() -> CorrectionPolicy {
    CorrectionPolicy::None
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterAdaptersPayload {
    pub policy_id: String,
    pub revision_ids: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratePayload {
    pub policy_id: String,
    #[serde(default)]
    pub revision_id: Option<String>,
    #[serde(default = "default_output_tokens")]
    pub output_tokens: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditPayload {
    pub revision_id: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

/// What a worker advertises when it joins.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerDescriptor {
    #[serde(default)]
    pub worker_id: Option<String>,
    pub role: Role,
    pub base_id: String,
    pub max_rank: u32,
    pub supported_modules: Vec<String>,
    #[serde(default = "default_one")]
    pub capacity: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerRegistration {
    pub worker_id: String,
    pub role: Role,
    pub base_id: String,
    pub shape_limits: ShapeLimits,
    pub capacity: u32,
    pub registered_at: u64,
    pub last_active: u64,
}

/// One admission decision, kept for auditing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub op_id: String,
    pub worker_id: String,
    pub tick: u64,
    pub op_base: String,
    pub worker_base: String,
    pub rank: u32,
    pub max_rank: u32,
    pub modules_fit: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub submitted: u64,
    pub committed: u64,
    pub failed: u64,
    pub rejected: u64,
    pub assignments: u64,
    pub evictions: u64,
    pub ticks: u64,
    pub workers: usize,
    pub queued: usize,
    pub running: usize,
    pub policies: usize,
    pub revisions: usize,
}

struct WorkerState {
    reg: WorkerRegistration,
    running: Vec<String>,
    trainer: Option<TrainerWorker>,
    /// Session token the trainer slot was last attached with.
    trainer_token: Option<String>,
    /// Revisions this sampler has activated.
    warm: BTreeSet<String>,
}

#[derive(Default)]
struct State {
    ops: BTreeMap<String, ServiceOp>,
    order: Vec<String>,
    queues: BTreeMap<QueueClass, VecDeque<String>>,
    control_queue: VecDeque<String>,
    workers: BTreeMap<String, WorkerState>,
    idempotency: HashMap<String, String>,
    counters: Counters,
    assignments: Vec<Assignment>,
    worker_seq: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlConfig {
    pub seed: u64,
    pub idle_threshold_ms: u64,
    /// Bytes per rank row in a trainer's adapter slot.
    pub trainer_row_bytes: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self { seed: 0, idle_threshold_ms: DEFAULT_IDLE_THRESHOLD_MS, trainer_row_bytes: 8 }
    }
}

pub struct ControlPlane {
    policies: Arc<PolicyService>,
    config: ControlConfig,
    state: Mutex<State>,
    rng: Mutex<ChaCha8Rng>,
}

fn schema<T: serde::de::DeserializeOwned>(kind: OpKind, payload: &Value) -> Result<T, ControlError> {
    serde_json::from_value(payload.clone()).map_err(|e| ControlError::SchemaInvalid { kind: Some(kind), message: e.to_string() })
}

impl ControlPlane {
    /// Builds the service over a store, replaying every op and result in it.
    /// Ops without a committed result return to their queues in submission order.
    pub fn open(store: Arc<Metastore>, config: ControlConfig) -> Result<Self, ControlError> {
        let policies = Arc::new(PolicyService::open(store.clone(), config.seed));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f70);
        rng.set_stream(store.next_seq());
        let cp = Self { policies, config, state: Mutex::new(State::default()), rng: Mutex::new(rng) };
        cp.replay(&store)?;
        Ok(cp)
    }

    fn replay(&self, store: &Metastore) -> Result<(), ControlError> {
        let mut st = self.lock();
        for e in store.entries() {
            match e.kind {
                EntryKind::Op => {
                    let mut op: ServiceOp = match serde_json::from_value(e.body.clone()) {
                        Ok(op) => op,
                        Err(_) => continue,
                    };
                    op.status = OpStatus::Queued;
                    if let Some(k) = &op.idempotency_key {
                        st.idempotency.insert(k.clone(), op.op_id.clone());
                    }
                    st.order.push(op.op_id.clone());
                    st.counters.submitted += 1;
                    st.ops.insert(op.op_id.clone(), op);
                }
                EntryKind::OpResult => {
                    let status: OpStatus = match e.body.get("status").and_then(|s| serde_json::from_value(s.clone()).ok()) {
                        Some(s) => s,
                        None => continue,
                    };
                    if let Some(op) = st.ops.get_mut(&e.subject_id) {
                        op.status = status;
                        op.result = e.body.get("result").cloned().filter(|v| !v.is_null());
                        op.error = e.body.get("error").and_then(|v| serde_json::from_value(v.clone()).ok());
                        op.result_ref = Some(e.seq);
                        match status {
                            OpStatus::Committed => st.counters.committed += 1,
                            OpStatus::Failed => st.counters.failed += 1,
                            OpStatus::Rejected => st.counters.rejected += 1,
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
        let pending: Vec<String> =
            st.order.iter().filter(|id| !st.ops[*id].status.is_terminal()).cloned().collect();
        for id in pending {
            let op = st.ops[&id].clone();
            match self.requirement(op.kind, &op.payload) {
                Ok(req) => {
                    let o = st.ops.get_mut(&id).expect("op exists");
                    o.class = req.as_ref().map(|(c, _)| c.clone());
                    o.shape = req.as_ref().map(|(_, s)| s.clone());
                    Self::enqueue(&mut st, &id, req.map(|(c, _)| c), false);
                }
                Err(e) => {
                    let o = st.ops.get_mut(&id).expect("op exists");
                    o.status = OpStatus::Failed;
                    o.error = Some(e.body());
                }
            }
        }
        Ok(())
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn policies(&self) -> &Arc<PolicyService> {
        &self.policies
    }

    pub fn store(&self) -> &Arc<Metastore> {
        self.policies.store()
    }

    pub fn config(&self) -> &ControlConfig {
        &self.config
    }

    fn now(&self) -> u64 {
        self.store().now_ms()
    }

    fn fresh_id(&self, prefix: &str) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().unwrap_or_else(|p| p.into_inner()).fill_bytes(&mut bytes);
        format!("{prefix}/{}", uuid::Builder::from_random_bytes(bytes).into_uuid())
    }

    /// Validates the payload and derives the queue class and adapter shape.
    fn requirement(&self, kind: OpKind, payload: &Value) -> Result<Option<(QueueClass, AdapterShape)>, ControlError> {
        let policy_of = |id: &str| self.policies.policy(id).ok_or_else(|| ControlError::UnknownPolicy(id.to_string()));
        let policy_id = match kind {
            OpKind::CreatePolicy => {
                let p: CreatePolicyPayload = schema(kind, payload)?;
                AdapterShape::new(p.rank, p.target_modules.iter().map(String::as_str))
                    .map_err(|e| ControlError::SchemaInvalid { kind: Some(kind), message: e.to_string() })?;
                return Ok(None);
            }
            OpKind::Audit => {
                let p: AuditPayload = schema(kind, payload)?;
                if self.policies.revision(&p.revision_id).is_none() {
                    return Err(ServiceError::Lifecycle(LifecycleError::UnknownRevision(p.revision_id)).into());
                }
                return Ok(None);
            }
            OpKind::TrainStep => schema::<TrainStepPayload>(kind, payload)?.policy_id,
            OpKind::Export => schema::<ExportPayload>(kind, payload)?.policy_id,
            OpKind::Sample => schema::<SamplePayload>(kind, payload)?.policy_id,
            OpKind::RegisterAdapters => schema::<RegisterAdaptersPayload>(kind, payload)?.policy_id,
            OpKind::Generate => schema::<GeneratePayload>(kind, payload)?.policy_id,
        };
        let rec = policy_of(&policy_id)?;
        let role = kind.role().expect("worker-bound kind");
        Ok(Some((QueueClass { base_id: rec.base_id, role }, rec.adapter_shape)))
    }

    fn enqueue(st: &mut State, id: &str, class: Option<QueueClass>, front: bool) {
        let q = match class {
            Some(c) => st.queues.entry(c).or_default(),
            None => &mut st.control_queue,
        };
        if front {
            q.push_front(id.to_string());
        } else {
            q.push_back(id.to_string());
        }
    }

    /// Persists the op as queued and returns its id before any execution.
    pub fn submit(&self, kind: OpKind, payload: Value, idempotency_key: Option<String>) -> Result<String, ControlError> {
        if let Some(key) = &idempotency_key {
            let st = self.lock();
            if let Some(existing) = st.idempotency.get(key) {
                if st.ops[existing].kind != kind {
                    return Err(ControlError::IdempotencyConflict { key: key.clone(), op_id: existing.clone() });
                }
                return Ok(existing.clone());
            }
        }
        let req = self.requirement(kind, &payload)?;
        let op = ServiceOp {
            op_id: self.fresh_id("op"),
            kind,
            payload,
            status: OpStatus::Queued,
            idempotency_key: idempotency_key.clone(),
            class: req.as_ref().map(|(c, _)| c.clone()),
            shape: req.as_ref().map(|(_, s)| s.clone()),
            assigned_worker: None,
            result: None,
            error: None,
            result_ref: None,
            submitted_at: self.now(),
        };
        let mut st = self.lock();
        if let Some(existing) = idempotency_key.as_ref().and_then(|k| st.idempotency.get(k)) {
            return Ok(existing.clone());
        }
        let body = serde_json::to_value(&op).expect("op serializes");
        self.store().commit_record(EntryKind::Op, &op.op_id, Some(&op.op_id), body)?;
        let id = op.op_id.clone();
        if let Some(k) = idempotency_key {
            st.idempotency.insert(k, id.clone());
        }
        Self::enqueue(&mut st, &id, op.class.clone(), false);
        st.order.push(id.clone());
        st.ops.insert(id.clone(), op);
        st.counters.submitted += 1;
        Ok(id)
    }

    pub fn poll(&self, op_id: &str) -> Result<ServiceOp, ControlError> {
        self.lock().ops.get(op_id).cloned().ok_or_else(|| ControlError::UnknownOp(op_id.to_string()))
    }

    /// Queued op ids of a class in FIFO order.
    pub fn queue(&self, class: &QueueClass) -> Vec<String> {
        self.lock().queues.get(class).map(|q| q.iter().cloned().collect()).unwrap_or_default()
    }

    pub fn register_worker(&self, desc: WorkerDescriptor) -> Result<WorkerRegistration, ControlError> {
        if desc.max_rank == 0 || desc.supported_modules.is_empty() || desc.capacity == 0 {
            return Err(ControlError::SchemaInvalid {
                kind: None,
                message: "max_rank, supported_modules and capacity must be non-empty".into(),
            });
        }
        let now = self.now();
        let mut st = self.lock();
        let worker_id = match desc.worker_id {
            Some(id) => id,
            None => {
                st.worker_seq += 1;
                format!("{}-{:04}", if desc.role == Role::Trainer { "trainer" } else { "sampler" }, st.worker_seq)
            }
        };
        let limits = ShapeLimits::new(desc.max_rank, desc.supported_modules.iter().map(String::as_str));
        let reg = WorkerRegistration {
            worker_id: worker_id.clone(),
            role: desc.role,
            base_id: desc.base_id.clone(),
            shape_limits: limits.clone(),
            capacity: desc.capacity,
            registered_at: now,
            last_active: now,
        };
        let trainer = (desc.role == Role::Trainer)
            .then(|| TrainerWorker::new(worker_id.clone(), desc.base_id, 0, limits, self.config.trainer_row_bytes));
        let prior = st.workers.insert(worker_id, WorkerState { reg: reg.clone(), running: vec![], trainer, trainer_token: None, warm: BTreeSet::new() });
        if let Some(prior) = prior {
            Self::requeue(&mut st, prior.running);
        }
        Ok(reg)
    }

    fn requeue(st: &mut State, running: Vec<String>) {
        for id in running.into_iter().rev() {
            let class = match st.ops.get_mut(&id) {
                Some(op) => {
                    op.status = OpStatus::Queued;
                    op.assigned_worker = None;
                    op.class.clone()
                }
                None => continue,
            };
            Self::enqueue(st, &id, class, true);
        }
    }

    pub fn workers(&self) -> Vec<WorkerRegistration> {
        self.lock().workers.values().map(|w| w.reg.clone()).collect()
    }

    /// Removes a worker; its running ops go back to the front of their queue.
    pub fn remove_worker(&self, worker_id: &str) -> Result<WorkerRegistration, ControlError> {
        let mut st = self.lock();
        let w = st.workers.remove(worker_id).ok_or_else(|| ControlError::UnknownWorker(worker_id.to_string()))?;
        Self::requeue(&mut st, w.running);
        st.counters.evictions += 1;
        Ok(w.reg)
    }

    /// Evicts workers that are idle and were last active at least `threshold_ms` ago.
    pub fn evict_idle(&self, threshold_ms: u64) -> Vec<String> {
        let now = self.now();
        let mut st = self.lock();
        let victims: Vec<String> = st
            .workers
            .values()
            .filter(|w| w.running.is_empty() && now.saturating_sub(w.reg.last_active) >= threshold_ms)
            .map(|w| w.reg.worker_id.clone())
            .collect();
        for v in &victims {
            st.workers.remove(v);
            st.counters.evictions += 1;
        }
        victims
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.lock().assignments.clone()
    }

    pub fn metrics(&self) -> Counters {
        let st = self.lock();
        let mut c = st.counters.clone();
        c.workers = st.workers.len();
        c.queued = st.ops.values().filter(|o| o.status == OpStatus::Queued).count();
        c.running = st.ops.values().filter(|o| o.status == OpStatus::Running).count();
        c.policies = self.policies.policies().len();
        c.revisions = self.policies.revision_count();
        c
    }

    /// One scheduler round: finish work assigned last round, run control ops,
    /// then assign queue heads to free compatible workers.
    pub fn tick(&self) -> Result<(), ControlError> {
        let now = self.now();
        let mut st = self.lock();
        st.counters.ticks += 1;
        let tick = st.counters.ticks;

        let worker_ids: Vec<String> = st.workers.keys().cloned().collect();
        for wid in worker_ids {
            let running = std::mem::take(&mut st.workers.get_mut(&wid).expect("worker").running);
            for op_id in running {
                let op = st.ops[&op_id].clone();
                let outcome = self.execute(&mut st, &op, Some(&wid));
                self.finish(&mut st, &op_id, outcome)?;
            }
            if let Some(w) = st.workers.get_mut(&wid) {
                w.reg.last_active = now;
            }
        }

        while let Some(op_id) = st.control_queue.pop_front() {
            let op = st.ops[&op_id].clone();
            let outcome = self.execute(&mut st, &op, None);
            self.finish(&mut st, &op_id, outcome)?;
        }

        let classes: Vec<QueueClass> = st.queues.keys().cloned().collect();
        for class in classes {
            while let Some(head) = st.queues.get(&class).and_then(|q| q.front().cloned()) {
                let shape = st.ops[&head].shape.clone().expect("worker-bound op has a shape");
                let of_class: Vec<&WorkerState> =
                    st.workers.values().filter(|w| w.reg.role == class.role && w.reg.base_id == class.base_id).collect();
                if of_class.is_empty() {
                    break;
                }
                let compatible: Vec<&WorkerState> = of_class.into_iter().filter(|w| shape.fits(&w.reg.shape_limits)).collect();
                if compatible.is_empty() {
                    st.queues.get_mut(&class).expect("queue").pop_front();
                    let err = ControlError::NoCompatibleWorkerClass {
                        base_id: class.base_id.clone(),
                        role: class.role,
                        rank: shape.rank,
                        modules: shape.target_modules.iter().cloned().collect(),
                    };
                    self.finish(&mut st, &head, Err((OpStatus::Rejected, err)))?;
                    continue;
                }
                let chosen = compatible
                    .into_iter()
                    .filter(|w| (w.running.len() as u32) < w.reg.capacity)
                    .min_by_key(|w| (w.running.len(), w.reg.worker_id.clone()))
                    .map(|w| w.reg.worker_id.clone());
                let Some(wid) = chosen else { break };
                st.queues.get_mut(&class).expect("queue").pop_front();
                let w = st.workers.get_mut(&wid).expect("worker");
                w.running.push(head.clone());
                w.reg.last_active = now;
                let a = Assignment {
                    op_id: head.clone(),
                    worker_id: wid.clone(),
                    tick,
                    op_base: class.base_id.clone(),
                    worker_base: w.reg.base_id.clone(),
                    rank: shape.rank,
                    max_rank: w.reg.shape_limits.max_rank,
                    modules_fit: shape.target_modules.is_subset(&w.reg.shape_limits.supported_modules),
                };
                let op = st.ops.get_mut(&head).expect("op");
                op.status = OpStatus::Running;
                op.assigned_worker = Some(wid);
                st.assignments.push(a);
                st.counters.assignments += 1;
            }
        }
        Ok(())
    }

    /// Ticks until nothing is queued or running, or `max_ticks` pass.
    pub fn run_until_idle(&self, max_ticks: usize) -> Result<usize, ControlError> {
        for i in 0..max_ticks {
            let busy = {
                let st = self.lock();
                st.ops.values().any(|o| o.status == OpStatus::Running) || !st.control_queue.is_empty()
            };
            let before = self.metrics();
            self.tick()?;
            let after = self.metrics();
            if !busy && after.running == 0 && before.assignments == after.assignments && after.queued == before.queued {
                return Ok(i + 1);
            }
        }
        Ok(max_ticks)
    }

    fn finish(&self, st: &mut State, op_id: &str, outcome: Result<Value, (OpStatus, ControlError)>) -> Result<(), ControlError> {
        let (status, result, error) = match outcome {
            Ok(v) => (OpStatus::Committed, Some(v), None),
            Err((status, e)) => (status, None, Some(e.body())),
        };
        let body = json!({ "status": status, "result": result, "error": error });
        let entry = self.store().commit_record(EntryKind::OpResult, op_id, Some(op_id), body)?;
        let op = st.ops.get_mut(op_id).expect("op");
        op.status = status;
        op.result = result;
        op.error = error;
        op.result_ref = Some(entry.seq);
        match status {
            OpStatus::Committed => st.counters.committed += 1,
            OpStatus::Failed => st.counters.failed += 1,
            OpStatus::Rejected => st.counters.rejected += 1,
            _ => {}
        }
        Ok(())
    }

    fn execute(&self, st: &mut State, op: &ServiceOp, worker: Option<&str>) -> Result<Value, (OpStatus, ControlError)> {
        let fail = |e: ControlError| (OpStatus::Failed, e);
        let svc = |e: ServiceError| (OpStatus::Failed, ControlError::Service(e));
        let ps = &self.policies;
        match op.kind {
            OpKind::CreatePolicy => {
                let p: CreatePolicyPayload = schema(op.kind, &op.payload).map_err(fail)?;
                let shape = AdapterShape::new(p.rank, p.target_modules.iter().map(String::as_str))
                    .map_err(|e| svc(ServiceError::Lifecycle(e)))?;
                let rec = ps.create_policy_keyed(&op.op_id, &p.base_id, shape, Some(&op.op_id)).map_err(svc)?;
                Ok(json!({ "policy_id": rec.policy_id }))
            }
            OpKind::Audit => {
                let p: AuditPayload = schema(op.kind, &op.payload).map_err(fail)?;
                let bytes = ps.read_revision_file(&p.revision_id).map_err(svc)?;
                let file = PackedFile::parse(bytes).map_err(|e| svc(ServiceError::Pack(e)))?;
                let report = audit_packed(&file, p.samples, p.seed);
                Ok(serde_json::to_value(report).expect("report serializes"))
            }
            OpKind::TrainStep => {
                let p: TrainStepPayload = schema(op.kind, &op.payload).map_err(fail)?;
                let wid = worker.expect("trainer op runs on a worker");
                let rec = ps.policy(&p.policy_id).ok_or_else(|| fail(ControlError::UnknownPolicy(p.policy_id.clone())))?;
                let lease = ps.acquire_session(&p.policy_id, wid).map_err(svc)?;
                let w = st.workers.get_mut(wid).expect("worker");
                let prior_token = w.trainer_token.replace(lease.token.clone());
                let trainer = w.trainer.as_mut().expect("trainer state");
                let run = (|| {
                    match trainer.active_policy() {
                        Some(active) if active == p.policy_id => {
                            trainer.detach(prior_token.as_deref().unwrap_or_default())?;
                            trainer.attach(&p.policy_id, &lease.token, &rec.adapter_shape)?;
                        }
                        Some(_) => {
                            trainer.switch_policy(&p.policy_id, &lease.token, &rec.adapter_shape)?;
                        }
                        None => {
                            trainer.attach(&p.policy_id, &lease.token, &rec.adapter_shape)?;
                        }
                    }
                    let mut position = 0;
                    for i in 0..p.steps {
                        position = trainer.run_update(&lease.token, p.seed.wrapping_add(i as u64))?.scheduler_position;
                    }
                    let digests = trainer.active_state().expect("attached").digests();
                    Ok::<_, TrainerError>((position, digests))
                })();
                let outcome = match run {
                    Ok((position, digests)) => {
                        let blob = serde_json::to_vec(&json!({ "scheduler_position": position, "digests": digests }))
                            .expect("checkpoint serializes");
                        ps.save_checkpoint(&p.policy_id, &lease.token, position, &blob)
                            .map(|e| (position, e.file_refs.first().cloned()))
                            .map_err(svc)
                    }
                    Err(e) => Err(fail(ControlError::Trainer(e))),
                };
                let checkpoint = outcome.as_ref().ok().and_then(|(_, r)| r.clone());
                ps.release_session(&p.policy_id, &lease.token, checkpoint.clone()).map_err(svc)?;
                let (position, _) = outcome?;
                Ok(json!({ "policy_id": p.policy_id, "step": position, "checkpoint_ref": checkpoint }))
            }
            OpKind::Export => {
                let p: ExportPayload = schema(op.kind, &op.payload).map_err(fail)?;
                let wid = worker.expect("trainer op runs on a worker");
                let layout = p.layout.unwrap_or(LayoutParams::new(2, 4, 2, 5));
                let (manifest, payloads) = SyntheticAdapter::tiny(layout).build(p.seed ^ p.step);
                let lease = ps.acquire_session(&p.policy_id, wid).map_err(svc)?;
                let out = ps.export_revision(&p.policy_id, &lease.token, p.step, &manifest, &payloads);
                ps.release_session(&p.policy_id, &lease.token, None).map_err(svc)?;
                let rev = out.map_err(svc)?;
                Ok(json!({ "revision_id": rev.revision_id, "file_ref": rev.file_ref, "manifest_digest": rev.manifest_digest }))
            }
            OpKind::Sample => {
                let p: SamplePayload = schema(op.kind, &op.payload).map_err(fail)?;
                let rev = ps.resolve(&p.policy_id, p.revision_id.as_deref()).map_err(svc)?;
                let rid = format!("rollout/{}", crate::lifecycle::uuid_from_key(&op.op_id));
                let rec = ps
                    .record_rollout_as(rid, &p.policy_id, &rev.revision_id, p.token_count, p.route_metadata, p.correction_policy, Some(&op.op_id))
                    .map_err(svc)?;
                Ok(json!({ "record_id": rec.record_id, "revision_id": rec.revision_id, "masked": rec.masked_count() }))
            }
            OpKind::RegisterAdapters => {
                let p: RegisterAdaptersPayload = schema(op.kind, &op.payload).map_err(fail)?;
                let wid = worker.expect("sampler op runs on a worker");
                let w = st.workers.get_mut(wid).expect("worker");
                let actor = ActorDescriptor::new(wid, w.reg.base_id.clone(), w.reg.shape_limits.clone());
                let mut ready = Vec::new();
                for rid in &p.revision_ids {
                    if let Err(reason) = ps.check_compatibility(rid, &actor).map_err(svc)? {
                        return Err(svc(ServiceError::Incompatible { revision: rid.clone(), reason }));
                    }
                    if ps.readiness(wid, rid).map(|r| r.state) == Some(ReadinessState::Ready) {
                        ready.push(rid.clone());
                        continue;
                    }
                    ps.read_revision_file(rid).map_err(svc)?;
                    for to in [ReadinessState::Registered, ReadinessState::Prewarming] {
                        ps.transition_readiness(wid, rid, to, None).map_err(svc)?;
                    }
                    let proof = ActivationProof::issue(wid, rid, self.now());
                    ps.transition_readiness(wid, rid, ReadinessState::Ready, Some(&proof)).map_err(svc)?;
                    w.warm.insert(rid.clone());
                    ready.push(rid.clone());
                }
                Ok(json!({ "actor_id": wid, "ready": ready }))
            }
            OpKind::Generate => {
                let p: GeneratePayload = schema(op.kind, &op.payload).map_err(fail)?;
                let wid = worker.expect("sampler op runs on a worker");
                let rev = ps.resolve(&p.policy_id, p.revision_id.as_deref()).map_err(svc)?;
                let w = st.workers.get_mut(wid).expect("worker");
                let actor = ActorDescriptor::new(wid, w.reg.base_id.clone(), w.reg.shape_limits.clone());
                if let Err(reason) = lorafleet_core::lifecycle::check_compatibility(&rev, &actor) {
                    return Err(svc(ServiceError::Incompatible { revision: rev.revision_id, reason }));
                }
                let path = if w.warm.contains(&rev.revision_id) {
                    "gpu_hit"
                } else {
                    ps.read_revision_file(&rev.revision_id).map_err(svc)?;
                    w.warm.insert(rev.revision_id.clone());
                    "cold_load"
                };
                Ok(json!({ "revision_id": rev.revision_id, "actor_id": wid, "path": path, "output_tokens": p.output_tokens }))
            }
        }
    }
}
