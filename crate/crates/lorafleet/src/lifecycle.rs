//! Durable policy records, revisions, rollouts and readiness, replayed from the metastore.

use std::collections::BTreeMap;
use std::fs;
use std::sync::{Arc, Mutex, MutexGuard};

use lorafleet_core::checksum::sha256_hex;
use lorafleet_core::lifecycle::{
    check_compatibility, policy_id, revision_id, ActivationProof, ActorDescriptor, AdapterRevision, AdapterShape,
    CorrectionPolicy, Incompatibility, LifecycleError, PolicyRecord, ReadinessEntry, ReadinessState, RolloutRecord,
    SessionLease, DEFAULT_SESSION_LEASE_MS,
};
use lorafleet_core::packfmt::{pack, AdapterManifest, PackError, TensorMap, FORMAT_VERSION};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::metastore::{files_digest, CommitEntry, EntryKind, ExternalRecord, Metastore, StoreError};

pub const ADAPTER_FILE: &str = "adapter.mtpk";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("revision {revision} is not compatible: {reason}")]
    Incompatible { revision: String, reason: Incompatibility },
    #[error("stored artifact for {revision} changed: digest {actual}, committed {expected}")]
    ArtifactChanged { revision: String, expected: String, actual: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Lifecycle(e) => e.code(),
            ServiceError::Store(e) => e.code(),
            ServiceError::Pack(e) => e.code(),
            ServiceError::Incompatible { reason, .. } => reason.code(),
            ServiceError::ArtifactChanged { .. } => "artifact_changed",
            ServiceError::Io(_) => "io_error",
        }
    }
}

/// One catalog adapter registered without going through an attempt directory.
#[derive(Clone, Debug)]
pub struct ExternalRevision {
    pub policy_key: String,
    pub base_id: String,
    pub shape: AdapterShape,
    pub step: u64,
    pub file_ref: String,
    pub manifest_digest: String,
}

#[derive(Default)]
struct State {
    policies: BTreeMap<String, PolicyRecord>,
    revisions: BTreeMap<String, AdapterRevision>,
    rollouts: BTreeMap<String, RolloutRecord>,
    readiness: BTreeMap<(String, String), ReadinessEntry>,
}

impl State {
    fn apply(&mut self, e: &CommitEntry) {
        match e.kind {
            EntryKind::Policy | EntryKind::Session => {
                if let Ok(rec) = serde_json::from_value::<PolicyRecord>(e.body.clone()) {
                    self.policies.insert(rec.policy_id.clone(), rec);
                }
            }
            EntryKind::Revision => {
                if let Ok(mut rev) = serde_json::from_value::<AdapterRevision>(e.body.clone()) {
                    rev.created_seq = e.seq;
                    if let Some(p) = self.policies.get_mut(&rev.policy_id) {
                        if !p.revision_ids.contains(&rev.revision_id) {
                            p.revision_ids.push(rev.revision_id.clone());
                        }
                    }
                    self.revisions.insert(rev.revision_id.clone(), rev);
                }
            }
            EntryKind::Checkpoint => {
                if let (Some(p), Some(f)) = (self.policies.get_mut(&e.subject_id), e.file_refs.first()) {
                    p.checkpoint_ref = Some(f.clone());
                }
            }
            EntryKind::RolloutRecord => {
                if let Ok(r) = serde_json::from_value::<RolloutRecord>(e.body.clone()) {
                    self.rollouts.insert(r.record_id.clone(), r);
                }
            }
            EntryKind::Readiness => {
                if let Ok(r) = serde_json::from_value::<ReadinessEntry>(e.body.clone()) {
                    self.readiness.insert((r.actor_id.clone(), r.revision_id.clone()), r);
                }
            }
            EntryKind::OpResult | EntryKind::Op => {}
        }
    }
}

/// Derives a stable uuid string from a key, so replays of the same request
/// name the same record.
pub fn uuid_from_key(key: &str) -> String {
    let digest = sha256_hex(key.as_bytes());
    let mut bytes = [0u8; 16];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&digest[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

pub struct PolicyService {
    store: Arc<Metastore>,
    state: Mutex<State>,
    rng: Mutex<ChaCha8Rng>,
    lease_ms: u64,
}

impl PolicyService {
    /// Rebuilds state from the store. Ids are drawn from a seeded stream keyed
    /// by the log position, so a restarted service never repeats an id.
    pub fn open(store: Arc<Metastore>, seed: u64) -> Self {
        let mut state = State::default();
        for e in store.entries() {
            state.apply(&e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(store.next_seq());
        Self { store, state: Mutex::new(state), rng: Mutex::new(rng), lease_ms: DEFAULT_SESSION_LEASE_MS }
    }

    pub fn with_lease_ms(mut self, lease_ms: u64) -> Self {
        self.lease_ms = lease_ms;
        self
    }

    pub fn store(&self) -> &Arc<Metastore> {
        &self.store
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn fresh_uuid(&self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().unwrap_or_else(|p| p.into_inner()).fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }

    fn commit_policy(&self, kind: EntryKind, rec: &PolicyRecord, op_id: Option<&str>) -> Result<(), ServiceError> {
        let body = serde_json::to_value(rec).expect("policy serializes");
        self.store.commit_record(kind, &rec.policy_id, op_id, body)?;
        Ok(())
    }

    pub fn create_policy(&self, base_id: &str, shape: AdapterShape) -> Result<PolicyRecord, ServiceError> {
        let id = policy_id(&self.fresh_uuid());
        self.create_policy_as(id, base_id, shape, None)
    }

    /// Creates the policy whose id derives from `key`, or returns it if a
    /// previous attempt already committed it.
    pub fn create_policy_keyed(&self, key: &str, base_id: &str, shape: AdapterShape, op_id: Option<&str>) -> Result<PolicyRecord, ServiceError> {
        self.create_policy_as(policy_id(&uuid_from_key(key)), base_id, shape, op_id)
    }

    fn create_policy_as(&self, id: String, base_id: &str, shape: AdapterShape, op_id: Option<&str>) -> Result<PolicyRecord, ServiceError> {
        let mut state = self.lock();
        if let Some(existing) = state.policies.get(&id) {
            return Ok(existing.clone());
        }
        let rec = PolicyRecord::new(id, base_id.to_string(), shape)?;
        self.commit_policy(EntryKind::Policy, &rec, op_id)?;
        state.policies.insert(rec.policy_id.clone(), rec.clone());
        Ok(rec)
    }

    fn with_policy<T>(
        &self,
        policy: &str,
        f: impl FnOnce(&mut PolicyRecord) -> Result<T, LifecycleError>,
    ) -> Result<T, ServiceError> {
        let mut state = self.lock();
        let mut rec = state
            .policies
            .get(policy)
            .cloned()
            .ok_or_else(|| LifecycleError::UnknownPolicy(policy.to_string()))?;
        let out = f(&mut rec)?;
        self.commit_policy(EntryKind::Session, &rec, None)?;
        state.policies.insert(policy.to_string(), rec);
        Ok(out)
    }

    pub fn acquire_session(&self, policy: &str, worker_id: &str) -> Result<SessionLease, ServiceError> {
        let token = format!("sess-{}", self.fresh_uuid());
        let now = self.store.now_ms();
        let lease = self.lease_ms;
        self.with_policy(policy, |rec| rec.acquire(worker_id, token, now, lease))
    }

    pub fn renew_session(&self, policy: &str, token: &str) -> Result<(), ServiceError> {
        let now = self.store.now_ms();
        let lease = self.lease_ms;
        self.with_policy(policy, |rec| rec.renew(token, now, lease))
    }

    pub fn release_session(&self, policy: &str, token: &str, checkpoint_ref: Option<String>) -> Result<(), ServiceError> {
        let now = self.store.now_ms();
        self.with_policy(policy, |rec| rec.release(token, now, checkpoint_ref))
    }

    fn check_session(&self, policy: &str, token: &str) -> Result<PolicyRecord, ServiceError> {
        let state = self.lock();
        let rec = state.policies.get(policy).ok_or_else(|| LifecycleError::UnknownPolicy(policy.to_string()))?;
        rec.check_session(token, self.store.now_ms())?;
        Ok(rec.clone())
    }

    /// Stores an opaque training-state blob and makes it the policy's checkpoint.
    pub fn save_checkpoint(&self, policy: &str, token: &str, step: u64, bytes: &[u8]) -> Result<CommitEntry, ServiceError> {
        self.check_session(policy, token)?;
        let op = format!("checkpoint/{policy}/{step}");
        let attempt = self.store.begin_attempt(&op, EntryKind::Checkpoint)?;
        self.store.write_attempt_file(&attempt, CHECKPOINT_FILE, bytes)?;
        let entry =
            self.store.commit(&op, &attempt, EntryKind::Checkpoint, policy, &[CHECKPOINT_FILE], None, json!({"step": step}))?;
        if let Some(p) = self.lock().policies.get_mut(policy) {
            p.checkpoint_ref = entry.file_refs.first().cloned();
        }
        Ok(entry)
    }

    /// Packs the adapter and commits it as an immutable revision.
    ///
    /// A retry of the same (policy, step, payload) returns the revision that
    /// is already committed instead of adding a second one.
    pub fn export_revision(
        &self,
        policy: &str,
        token: &str,
        step: u64,
        manifest: &AdapterManifest,
        payloads: &TensorMap,
    ) -> Result<AdapterRevision, ServiceError> {
        let rec = self.check_session(policy, token)?;
        let bytes = pack(manifest, payloads)?.into_bytes();
        let digest = sha256_hex(&bytes);
        let rid = revision_id(policy, step, &digest);
        if let Some(existing) = self.lock().revisions.get(&rid) {
            return Ok(existing.clone());
        }
        let files_dg = files_digest([(ADAPTER_FILE, bytes.as_slice())]);
        let mut revision = AdapterRevision {
            revision_id: rid.clone(),
            policy_id: policy.to_string(),
            base_id: rec.base_id.clone(),
            step,
            file_ref: format!("{}/{}/{files_dg}/{ADAPTER_FILE}", crate::metastore::OBJECTS_DIR, &files_dg[..2]),
            manifest_digest: digest,
            created_seq: 0,
            shape: rec.adapter_shape.clone(),
            format_version: FORMAT_VERSION,
        };
        let op = format!("export/{rid}");
        let attempt = self.store.begin_attempt(&op, EntryKind::Revision)?;
        self.store.write_attempt_file(&attempt, ADAPTER_FILE, &bytes)?;
        let body = serde_json::to_value(&revision).expect("revision serializes");
        let entry = self.store.commit(&op, &attempt, EntryKind::Revision, &rid, &[ADAPTER_FILE], Some(&files_dg), body)?;
        revision.created_seq = entry.seq;
        let mut state = self.lock();
        state.apply(&entry);
        Ok(state.revisions[&rid].clone())
    }

    /// Registers already-written adapter files as one policy and one revision each.
    pub fn register_external(&self, items: &[ExternalRevision]) -> Result<Vec<AdapterRevision>, ServiceError> {
        let mut records = Vec::with_capacity(items.len() * 2);
        let mut out = Vec::with_capacity(items.len());
        {
            let state = self.lock();
            for it in items {
                let pid = policy_id(&uuid_from_key(&it.policy_key));
                let rid = revision_id(&pid, it.step, &it.manifest_digest);
                if state.revisions.contains_key(&rid) {
                    continue;
                }
                let mut rec = PolicyRecord::new(pid.clone(), it.base_id.clone(), it.shape.clone())?;
                if let Some(existing) = state.policies.get(&pid) {
                    rec = existing.clone();
                } else {
                    records.push(ExternalRecord {
                        kind: EntryKind::Policy,
                        subject_id: pid.clone(),
                        op_id: None,
                        file_refs: vec![],
                        payload_digest: sha256_hex(pid.as_bytes()),
                        body: serde_json::to_value(&rec).expect("policy serializes"),
                    });
                }
                let rev = AdapterRevision {
                    revision_id: rid.clone(),
                    policy_id: pid,
                    base_id: rec.base_id.clone(),
                    step: it.step,
                    file_ref: it.file_ref.clone(),
                    manifest_digest: it.manifest_digest.clone(),
                    created_seq: 0,
                    shape: rec.adapter_shape.clone(),
                    format_version: FORMAT_VERSION,
                };
                records.push(ExternalRecord {
                    kind: EntryKind::Revision,
                    subject_id: rid,
                    op_id: None,
                    file_refs: vec![it.file_ref.clone()],
                    payload_digest: it.manifest_digest.clone(),
                    body: serde_json::to_value(&rev).expect("revision serializes"),
                });
            }
        }
        let entries = self.store.commit_external_batch(records)?;
        let mut state = self.lock();
        for e in &entries {
            state.apply(e);
            if e.kind == EntryKind::Revision {
                out.push(state.revisions[&e.subject_id].clone());
            }
        }
        Ok(out)
    }

    /// Reads a revision's packed file and checks it against the committed digest.
    pub fn read_revision_file(&self, revision: &str) -> Result<Vec<u8>, ServiceError> {
        let rev = self.revision(revision).ok_or_else(|| LifecycleError::UnknownRevision(revision.to_string()))?;
        let bytes = fs::read(self.store.resolve_ref(&rev.file_ref))?;
        let actual = sha256_hex(&bytes);
        if actual != rev.manifest_digest {
            return Err(ServiceError::ArtifactChanged { revision: revision.to_string(), expected: rev.manifest_digest, actual });
        }
        Ok(bytes)
    }

    pub fn record_rollout(
        &self,
        policy: &str,
        revision: &str,
        token_count: u32,
        route_metadata: Vec<Option<Vec<u32>>>,
        correction: CorrectionPolicy,
    ) -> Result<RolloutRecord, ServiceError> {
        let id = format!("rollout/{}", self.fresh_uuid());
        self.record_rollout_as(id, policy, revision, token_count, route_metadata, correction, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record_rollout_as(
        &self,
        record_id: String,
        policy: &str,
        revision: &str,
        token_count: u32,
        route_metadata: Vec<Option<Vec<u32>>>,
        correction: CorrectionPolicy,
        op_id: Option<&str>,
    ) -> Result<RolloutRecord, ServiceError> {
        let mut state = self.lock();
        if let Some(existing) = state.rollouts.get(&record_id) {
            return Ok(existing.clone());
        }
        match state.revisions.get(revision) {
            Some(r) if r.policy_id == policy => {}
            _ => return Err(LifecycleError::UnknownRevision(revision.to_string()).into()),
        }
        let rec = RolloutRecord::new(
            record_id,
            policy.to_string(),
            revision.to_string(),
            token_count,
            route_metadata,
            correction,
        )?;
        let body = serde_json::to_value(&rec).expect("rollout serializes");
        self.store.commit_record(EntryKind::RolloutRecord, &rec.record_id, op_id, body)?;
        state.rollouts.insert(rec.record_id.clone(), rec.clone());
        Ok(rec)
    }

    pub fn transition_readiness(
        &self,
        actor_id: &str,
        revision: &str,
        to: ReadinessState,
        proof: Option<&ActivationProof>,
    ) -> Result<ReadinessEntry, ServiceError> {
        let mut state = self.lock();
        if !state.revisions.contains_key(revision) {
            return Err(LifecycleError::UnknownRevision(revision.to_string()).into());
        }
        let key = (actor_id.to_string(), revision.to_string());
        let mut entry = state.readiness.get(&key).cloned().unwrap_or_else(|| ReadinessEntry::absent(actor_id, revision));
        entry.transition(to, self.store.now_ms(), proof)?;
        let body = serde_json::to_value(&entry).expect("readiness serializes");
        self.store.commit_record(EntryKind::Readiness, revision, None, body)?;
        state.readiness.insert(key, entry.clone());
        Ok(entry)
    }

    pub fn check_compatibility(&self, revision: &str, actor: &ActorDescriptor) -> Result<Result<(), Incompatibility>, ServiceError> {
        let rev = self.revision(revision).ok_or_else(|| LifecycleError::UnknownRevision(revision.to_string()))?;
        Ok(check_compatibility(&rev, actor))
    }

    /// The pinned revision if given, else the latest committed one.
    pub fn resolve(&self, policy: &str, pinned: Option<&str>) -> Result<AdapterRevision, ServiceError> {
        let state = self.lock();
        let rec = state.policies.get(policy).ok_or_else(|| LifecycleError::UnknownPolicy(policy.to_string()))?;
        let rid = match pinned {
            Some(r) => r,
            None => rec.latest_revision().ok_or_else(|| LifecycleError::UnknownRevision(format!("{policy} has no revisions")))?,
        };
        match state.revisions.get(rid) {
            Some(r) if r.policy_id == policy => Ok(r.clone()),
            _ => Err(LifecycleError::UnknownRevision(rid.to_string()).into()),
        }
    }

    pub fn policy(&self, id: &str) -> Option<PolicyRecord> {
        self.lock().policies.get(id).cloned()
    }

    pub fn policies(&self) -> Vec<PolicyRecord> {
        self.lock().policies.values().cloned().collect()
    }

    pub fn revision(&self, id: &str) -> Option<AdapterRevision> {
        self.lock().revisions.get(id).cloned()
    }

    /// Revisions of a policy in commit order.
    pub fn revisions_of(&self, policy: &str) -> Vec<AdapterRevision> {
        let state = self.lock();
        let mut revs: Vec<AdapterRevision> = state.revisions.values().filter(|r| r.policy_id == policy).cloned().collect();
        revs.sort_by_key(|r| r.created_seq);
        revs
    }

    pub fn revision_count(&self) -> usize {
        self.lock().revisions.len()
    }

    pub fn rollout(&self, id: &str) -> Option<RolloutRecord> {
        self.lock().rollouts.get(id).cloned()
    }

    pub fn readiness(&self, actor_id: &str, revision: &str) -> Option<ReadinessEntry> {
        self.lock().readiness.get(&(actor_id.to_string(), revision.to_string())).cloned()
    }
}

/// Snapshot used by the HTTP API and CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyView {
    pub policy: PolicyRecord,
    pub revisions: Vec<AdapterRevision>,
}

impl PolicyService {
    pub fn view(&self, policy: &str) -> Option<PolicyView> {
        self.policy(policy).map(|p| PolicyView { revisions: self.revisions_of(policy), policy: p })
    }
}
