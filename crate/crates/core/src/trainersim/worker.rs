use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::checksum::{crc32, sha256_hex, sha256_hex_parts};
use crate::lifecycle::{AdapterShape, ShapeLimits};

/// Opaque payload with the digest taken when it was written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub bytes: Vec<u8>,
    pub digest: String,
}

impl Blob {
    pub fn new(bytes: Vec<u8>) -> Self {
        let digest = sha256_hex(&bytes);
        Self { bytes, digest }
    }

    pub fn zeroed(len: usize) -> Self {
        Self::new(vec![0; len])
    }

    pub fn is_intact(&self) -> bool {
        sha256_hex(&self.bytes) == self.digest
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateComponent {
    AdapterTensors,
    OptimizerMoments,
    SchedulerPosition,
    AccumulatedGradients,
    RolloutRecords,
}

/// Everything a policy needs to resume training on another turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    pub adapter_tensors: Blob,
    pub optimizer_moments: Blob,
    pub scheduler_position: u64,
    pub accumulated_gradients: Blob,
    pub rollout_records: Vec<String>,
}

/// Per-component digests of a [`TrainingState`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDigests {
    pub adapter_tensors: String,
    pub optimizer_moments: String,
    pub scheduler_position: u64,
    pub accumulated_gradients: String,
    pub rollout_records: String,
}

impl TrainingState {
    fn fresh(adapter_len: usize) -> Self {
        Self {
            adapter_tensors: Blob::zeroed(adapter_len),
            optimizer_moments: Blob::zeroed(adapter_len * 2),
            scheduler_position: 0,
            accumulated_gradients: Blob::zeroed(adapter_len),
            rollout_records: Vec::new(),
        }
    }

    /// Digests recomputed from the current bytes.
    pub fn digests(&self) -> StateDigests {
        StateDigests {
            adapter_tensors: sha256_hex(&self.adapter_tensors.bytes),
            optimizer_moments: sha256_hex(&self.optimizer_moments.bytes),
            scheduler_position: self.scheduler_position,
            accumulated_gradients: sha256_hex(&self.accumulated_gradients.bytes),
            rollout_records: sha256_hex_parts(self.rollout_records.iter().flat_map(|r| [r.as_bytes(), b"\n"])),
        }
    }

    fn first_mismatch(&self, saved: &StateDigests) -> Option<StateComponent> {
        let now = self.digests();
        if now.adapter_tensors != saved.adapter_tensors || !self.adapter_tensors.is_intact() {
            Some(StateComponent::AdapterTensors)
        } else if now.optimizer_moments != saved.optimizer_moments || !self.optimizer_moments.is_intact() {
            Some(StateComponent::OptimizerMoments)
        } else if now.scheduler_position != saved.scheduler_position {
            Some(StateComponent::SchedulerPosition)
        } else if now.accumulated_gradients != saved.accumulated_gradients || !self.accumulated_gradients.is_intact() {
            Some(StateComponent::AccumulatedGradients)
        } else if now.rollout_records != saved.rollout_records {
            Some(StateComponent::RolloutRecords)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedState {
    pub state: TrainingState,
    pub digests: StateDigests,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub saved_policy: String,
    pub saved: StateDigests,
    pub restored_policy: String,
    pub restored: StateDigests,
    pub restored_fresh: bool,
    pub base_resident_bytes: u64,
}

#[derive(Clone, Debug)]
struct ActiveSession {
    policy_id: String,
    token: String,
    shape: AdapterShape,
    state: TrainingState,
    pending_microbatches: u32,
}

/// A trainer with a resident base and one max-shape adapter slot.
///
/// The slot is module-major: for each supported module (sorted), `max_rank`
/// rows of `row_bytes` bytes.
#[derive(Clone, Debug)]
pub struct TrainerWorker {
    pub worker_id: String,
    pub base_id: String,
    base_resident_bytes: u64,
    limits: ShapeLimits,
    modules: Vec<String>,
    row_bytes: usize,
    slot: Vec<u8>,
    active: Option<ActiveSession>,
    store: BTreeMap<String, SavedState>,
}

impl TrainerWorker {
    pub fn new(worker_id: impl Into<String>, base_id: impl Into<String>, base_resident_bytes: u64, limits: ShapeLimits, row_bytes: usize) -> Self {
        let modules: Vec<String> = limits.supported_modules.iter().cloned().collect();
        let slot = vec![0; modules.len() * limits.max_rank as usize * row_bytes];
        Self {
            worker_id: worker_id.into(),
            base_id: base_id.into(),
            base_resident_bytes,
            limits,
            modules,
            row_bytes,
            slot,
            active: None,
            store: BTreeMap::new(),
        }
    }

    pub fn base_resident_bytes(&self) -> u64 {
        self.base_resident_bytes
    }

    pub fn slot_bytes(&self) -> &[u8] {
        &self.slot
    }

    pub fn active_policy(&self) -> Option<&str> {
        self.active.as_ref().map(|a| a.policy_id.as_str())
    }

    pub fn active_state(&self) -> Option<&TrainingState> {
        self.active.as_ref().map(|a| &a.state)
    }

    /// Committed training states, keyed by policy id.
    pub fn store(&self) -> &BTreeMap<String, SavedState> {
        &self.store
    }

    /// Direct access to the durable store; used to inject storage faults.
    pub fn store_mut(&mut self) -> &mut BTreeMap<String, SavedState> {
        &mut self.store
    }

    /// Byte ranges of the slot that belong to `shape`.
    fn active_ranges(&self, shape: &AdapterShape) -> Vec<core::ops::Range<usize>> {
        let rank_rows = self.limits.max_rank as usize;
        let mut ranges = Vec::new();
        for (mi, module) in self.modules.iter().enumerate() {
            if shape.target_modules.contains(module) {
                let start = mi * rank_rows * self.row_bytes;
                ranges.push(start..start + shape.rank as usize * self.row_bytes);
            }
        }
        ranges
    }

    fn adapter_len(&self, shape: &AdapterShape) -> usize {
        shape.target_modules.len() * shape.rank as usize * self.row_bytes
    }

    /// True when every byte outside the active policy's region is zero.
    pub fn inactive_region_is_zero(&self) -> bool {
        let ranges = match &self.active {
            Some(a) => self.active_ranges(&a.shape),
            None => Vec::new(),
        };
        self.slot.iter().enumerate().all(|(i, &b)| b == 0 || ranges.iter().any(|r| r.contains(&i)))
    }

    fn load_into_slot(&mut self, shape: &AdapterShape, adapter: &[u8]) {
        self.slot.iter_mut().for_each(|b| *b = 0);
        let mut cursor = 0;
        for range in self.active_ranges(shape) {
            let len = range.len();
            self.slot[range].copy_from_slice(&adapter[cursor..cursor + len]);
            cursor += len;
        }
    }

    fn extract_adapter(&self, shape: &AdapterShape) -> Vec<u8> {
        self.active_ranges(shape).into_iter().flat_map(|r| self.slot[r].iter().copied()).collect()
    }

    fn check_fits(&self, policy_id: &str, shape: &AdapterShape) -> Result<(), TrainerError> {
        if shape.fits(&self.limits) {
            Ok(())
        } else {
            Err(TrainerError::ShapeExceedsSlot(policy_id.to_string()))
        }
    }

    fn restore(&self, policy_id: &str, shape: &AdapterShape) -> Result<(TrainingState, bool), TrainerError> {
        match self.store.get(policy_id) {
            Some(saved) => {
                if let Some(component) = saved.state.first_mismatch(&saved.digests) {
                    return Err(TrainerError::StateDigestMismatch { policy: policy_id.to_string(), component });
                }
                if saved.state.adapter_tensors.bytes.len() != self.adapter_len(shape) {
                    return Err(TrainerError::StateDigestMismatch {
                        policy: policy_id.to_string(),
                        component: StateComponent::AdapterTensors,
                    });
                }
                Ok((saved.state.clone(), false))
            }
            None => Ok((TrainingState::fresh(self.adapter_len(shape)), true)),
        }
    }

    fn save_active(&mut self) -> Result<(String, StateDigests), TrainerError> {
        let active = self.active.as_ref().ok_or_else(|| TrainerError::SessionViolation("no active session".into()))?;
        if active.pending_microbatches > 0 {
            return Err(TrainerError::SessionViolation(alloc::format!(
                "policy {} is mid-accumulation ({} micro-batches pending)",
                active.policy_id, active.pending_microbatches
            )));
        }
        let mut state = active.state.clone();
        state.adapter_tensors = Blob::new(self.extract_adapter(&active.shape));
        let digests = state.digests();
        let policy = active.policy_id.clone();
        self.store.insert(policy.clone(), SavedState { state, digests: digests.clone() });
        Ok((policy, digests))
    }

    /// Starts a session on an idle worker, restoring any saved state.
    pub fn attach(&mut self, policy_id: &str, token: &str, shape: &AdapterShape) -> Result<StateDigests, TrainerError> {
        if let Some(a) = &self.active {
            return Err(TrainerError::SessionViolation(alloc::format!("worker busy with {}", a.policy_id)));
        }
        self.check_fits(policy_id, shape)?;
        let (state, _) = self.restore(policy_id, shape)?;
        self.load_into_slot(shape, &state.adapter_tensors.bytes);
        let digests = state.digests();
        self.active = Some(ActiveSession {
            policy_id: policy_id.to_string(),
            token: token.to_string(),
            shape: shape.clone(),
            state,
            pending_microbatches: 0,
        });
        Ok(digests)
    }

    /// Saves the active policy and leaves the slot empty.
    pub fn detach(&mut self, token: &str) -> Result<StateDigests, TrainerError> {
        self.session(token)?;
        let (_, digests) = self.save_active()?;
        self.active = None;
        self.slot.iter_mut().for_each(|b| *b = 0);
        Ok(digests)
    }

    /// Writes the active policy's state out and restores `to_policy` in its place.
    pub fn switch_policy(&mut self, to_policy: &str, to_token: &str, to_shape: &AdapterShape) -> Result<SwitchReport, TrainerError> {
        self.check_fits(to_policy, to_shape)?;
        if self.active_policy() == Some(to_policy) {
            return Err(TrainerError::SessionViolation(alloc::format!("{to_policy} is already active")));
        }
        // Validate the restore side before touching the slot.
        let (state, restored_fresh) = self.restore(to_policy, to_shape)?;
        let (saved_policy, saved) = self.save_active()?;
        self.load_into_slot(to_shape, &state.adapter_tensors.bytes);
        let restored = state.digests();
        self.active = Some(ActiveSession {
            policy_id: to_policy.to_string(),
            token: to_token.to_string(),
            shape: to_shape.clone(),
            state,
            pending_microbatches: 0,
        });
        Ok(SwitchReport {
            saved_policy,
            saved,
            restored_policy: to_policy.to_string(),
            restored,
            restored_fresh,
            base_resident_bytes: self.base_resident_bytes,
        })
    }

    fn session(&mut self, token: &str) -> Result<&mut ActiveSession, TrainerError> {
        self.active.as_mut().filter(|a| a.token == token).ok_or(TrainerError::NoSession)
    }

    fn rng_for(policy_id: &str, step: u64, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(((crc32(policy_id.as_bytes()) as u64) << 32) ^ step ^ salt.rotate_left(17))
    }

    /// Adds one micro-batch of gradients without stepping the optimizer.
    pub fn accumulate_microbatch(&mut self, token: &str, batch_seed: u64) -> Result<(), TrainerError> {
        let session = self.session(token)?;
        let mut rng = Self::rng_for(&session.policy_id, session.state.scheduler_position, batch_seed ^ 0xA5A5);
        let mut grads = session.state.accumulated_gradients.bytes.clone();
        for b in grads.iter_mut() {
            *b ^= rng.next_u32() as u8;
        }
        session.state.accumulated_gradients = Blob::new(grads);
        session.pending_microbatches += 1;
        Ok(())
    }

    /// One optimizer step on the active policy. Only the active region of the
    /// slot is written; padding stays zero.
    pub fn run_update(&mut self, token: &str, batch_seed: u64) -> Result<&TrainingState, TrainerError> {
        let (policy_id, shape, step) = {
            let s = self.session(token)?;
            (s.policy_id.clone(), s.shape.clone(), s.state.scheduler_position + 1)
        };
        let mut rng = Self::rng_for(&policy_id, step, batch_seed);
        for range in self.active_ranges(&shape) {
            rng.fill_bytes(&mut self.slot[range]);
        }
        let adapter = self.extract_adapter(&shape);
        let mut moments = vec![0u8; adapter.len() * 2];
        rng.fill_bytes(&mut moments);
        let session = self.session(token)?;
        session.state.adapter_tensors = Blob::new(adapter);
        session.state.optimizer_moments = Blob::new(moments);
        session.state.accumulated_gradients = Blob::zeroed(session.state.accumulated_gradients.bytes.len());
        session.state.scheduler_position = step;
        session.pending_microbatches = 0;
        Ok(&session.state)
    }

    pub fn attach_rollout(&mut self, token: &str, record_id: &str) -> Result<(), TrainerError> {
        self.session(token)?.state.rollout_records.push(record_id.to_string());
        Ok(())
    }
}
