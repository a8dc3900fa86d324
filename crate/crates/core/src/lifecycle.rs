//! Policy records, adapter revisions, rollout records and readiness.
//!
//! These are the pure rules. Durable storage of the records lives in the
//! `lorafleet` crate, which replays them from the metadata log.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::checksum::crc32;
use crate::packfmt::FORMAT_VERSION;
use crate::Millis;

/// Default lease of a training session before it must be renewed.
pub const DEFAULT_SESSION_LEASE_MS: Millis = 60_000;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LifecycleError {
    #[error("invalid adapter shape: {0}")]
    InvalidShape(String),
    #[error("policy {policy} already has a training session held by {holder}")]
    SessionHeld { policy: String, holder: String },
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("no valid session for policy {0}")]
    NoSession(String),
    #[error("unknown or uncommitted revision {0}")]
    UnknownRevision(String),
    #[error("illegal readiness transition {from} -> {to}")]
    IllegalTransition { from: ReadinessState, to: ReadinessState },
    #[error("ready requires an activation proof for ({actor}, {revision})")]
    MissingActivationProof { actor: String, revision: String },
    #[error("invalid rollout record: {0}")]
    InvalidRollout(String),
}

impl LifecycleError {
    pub fn code(&self) -> &'static str {
        match self {
            LifecycleError::InvalidShape(_) => "invalid_shape",
            LifecycleError::SessionHeld { .. } => "session_held",
            LifecycleError::UnknownPolicy(_) => "unknown_policy",
            LifecycleError::NoSession(_) => "no_session",
            LifecycleError::UnknownRevision(_) => "unknown_revision",
            LifecycleError::IllegalTransition { .. } => "illegal_transition",
            LifecycleError::MissingActivationProof { .. } => "missing_activation_proof",
            LifecycleError::InvalidRollout(_) => "invalid_rollout",
        }
    }
}

/// LoRA rank and the modules it attaches to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub rank: u32,
    pub target_modules: BTreeSet<String>,
}

impl AdapterShape {
    pub fn new<I, S>(rank: u32, modules: I) -> Result<Self, LifecycleError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let shape = Self { rank, target_modules: modules.into_iter().map(Into::into).collect() };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), LifecycleError> {
        if self.rank == 0 {
            return Err(LifecycleError::InvalidShape("rank must be at least 1".into()));
        }
        if self.target_modules.is_empty() {
            return Err(LifecycleError::InvalidShape("target_modules must not be empty".into()));
        }
        Ok(())
    }

    /// Whether a worker advertising `limits` can host this shape.
    pub fn fits(&self, limits: &ShapeLimits) -> bool {
        self.rank <= limits.max_rank && self.target_modules.is_subset(&limits.supported_modules)
    }
}

/// Largest adapter shape a worker or serving actor accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeLimits {
    pub max_rank: u32,
    pub supported_modules: BTreeSet<String>,
}

impl ShapeLimits {
    pub fn new<I, S>(max_rank: u32, modules: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { max_rank, supported_modules: modules.into_iter().map(Into::into).collect() }
    }
}

/// `policy/<uuid>`
pub fn policy_id(uuid: &str) -> String {
    format!("policy/{uuid}")
}

/// The uuid part of a policy id.
pub fn policy_uuid(policy_id: &str) -> &str {
    policy_id.strip_prefix("policy/").unwrap_or(policy_id)
}

/// `rev/<policy-uuid>/<step>-<first 8 hex digits of the manifest digest>`
pub fn revision_id(policy_id: &str, step: u64, manifest_digest: &str) -> String {
    let short = &manifest_digest[..manifest_digest.len().min(8)];
    format!("rev/{}/{step}-{short}", policy_uuid(policy_id))
}

/// Lease on the single training session of a policy record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLease {
    pub token: String,
    pub worker_id: String,
    pub expires_at: Millis,
}

impl SessionLease {
    pub fn is_live(&self, now: Millis) -> bool {
        now < self.expires_at
    }
}

/// Durable record of one trained behavior.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub policy_id: String,
    pub base_id: String,
    pub adapter_shape: AdapterShape,
    pub checkpoint_ref: Option<String>,
    pub revision_ids: Vec<String>,
    pub session: Option<SessionLease>,
}

impl PolicyRecord {
    pub fn new(policy_id: String, base_id: String, adapter_shape: AdapterShape) -> Result<Self, LifecycleError> {
        adapter_shape.validate()?;
        Ok(Self { policy_id, base_id, adapter_shape, checkpoint_ref: None, revision_ids: Vec::new(), session: None })
    }

    pub fn session_holder(&self, now: Millis) -> Option<&str> {
        self.session.as_ref().filter(|s| s.is_live(now)).map(|s| s.worker_id.as_str())
    }

    /// Compare-and-set on the session holder. An expired lease counts as free.
    pub fn acquire(&mut self, worker_id: &str, token: String, now: Millis, lease_ms: Millis) -> Result<SessionLease, LifecycleError> {
        if let Some(holder) = self.session_holder(now) {
            return Err(LifecycleError::SessionHeld { policy: self.policy_id.clone(), holder: holder.to_string() });
        }
        let lease = SessionLease { token, worker_id: worker_id.to_string(), expires_at: now + lease_ms };
        self.session = Some(lease.clone());
        Ok(lease)
    }

    /// Checks that `token` names the live session.
    pub fn check_session(&self, token: &str, now: Millis) -> Result<&SessionLease, LifecycleError> {
        self.session
            .as_ref()
            .filter(|s| s.token == token && s.is_live(now))
            .ok_or_else(|| LifecycleError::NoSession(self.policy_id.clone()))
    }

    pub fn renew(&mut self, token: &str, now: Millis, lease_ms: Millis) -> Result<(), LifecycleError> {
        self.check_session(token, now)?;
        if let Some(s) = self.session.as_mut() {
            s.expires_at = now + lease_ms;
        }
        Ok(())
    }

    /// Ends the session, recording the handed-back training state reference if any.
    pub fn release(&mut self, token: &str, now: Millis, checkpoint_ref: Option<String>) -> Result<(), LifecycleError> {
        self.check_session(token, now)?;
        self.session = None;
        if checkpoint_ref.is_some() {
            self.checkpoint_ref = checkpoint_ref;
        }
        Ok(())
    }

    pub fn latest_revision(&self) -> Option<&str> {
        self.revision_ids.last().map(String::as_str)
    }
}

/// Immutable exported adapter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRevision {
    pub revision_id: String,
    pub policy_id: String,
    pub base_id: String,
    pub step: u64,
    pub file_ref: String,
    pub manifest_digest: String,
    pub created_seq: u64,
    pub shape: AdapterShape,
    pub format_version: u32,
}

/// Base deployment an actor serves and the adapter shapes it accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorDescriptor {
    pub actor_id: String,
    pub base_id: String,
    pub limits: ShapeLimits,
    pub format_versions: Vec<u32>,
}

impl ActorDescriptor {
    pub fn new(actor_id: impl Into<String>, base_id: impl Into<String>, limits: ShapeLimits) -> Self {
        Self { actor_id: actor_id.into(), base_id: base_id.into(), limits, format_versions: alloc::vec![FORMAT_VERSION] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Incompatibility {
    BaseMismatch { revision_base: String, actor_base: String },
    RankExceedsLimit { rank: u32, max_rank: u32 },
    UnsupportedModules { modules: Vec<String> },
    UnsupportedFormat { version: u32 },
}

impl Incompatibility {
    pub fn code(&self) -> &'static str {
        match self {
            Incompatibility::BaseMismatch { .. } => "base_mismatch",
            Incompatibility::RankExceedsLimit { .. } => "rank_exceeds_limit",
            Incompatibility::UnsupportedModules { .. } => "unsupported_modules",
            Incompatibility::UnsupportedFormat { .. } => "unsupported_format",
        }
    }
}

impl fmt::Display for Incompatibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Incompatibility::BaseMismatch { revision_base, actor_base } => {
                write!(f, "revision base {revision_base} does not match actor base {actor_base}")
            }
            Incompatibility::RankExceedsLimit { rank, max_rank } => write!(f, "rank {rank} exceeds actor limit {max_rank}"),
            Incompatibility::UnsupportedModules { modules } => write!(f, "unsupported target modules {modules:?}"),
            Incompatibility::UnsupportedFormat { version } => write!(f, "unsupported packed format version {version}"),
        }
    }
}

/// Admission check of a revision against an actor's base deployment.
pub fn check_compatibility(revision: &AdapterRevision, actor: &ActorDescriptor) -> Result<(), Incompatibility> {
    if revision.base_id != actor.base_id {
        return Err(Incompatibility::BaseMismatch {
            revision_base: revision.base_id.clone(),
            actor_base: actor.base_id.clone(),
        });
    }
    if revision.shape.rank > actor.limits.max_rank {
        return Err(Incompatibility::RankExceedsLimit { rank: revision.shape.rank, max_rank: actor.limits.max_rank });
    }
    let missing: Vec<String> =
        revision.shape.target_modules.difference(&actor.limits.supported_modules).cloned().collect();
    if !missing.is_empty() {
        return Err(Incompatibility::UnsupportedModules { modules: missing });
    }
    if !actor.format_versions.contains(&revision.format_version) {
        return Err(Incompatibility::UnsupportedFormat { version: revision.format_version });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionPolicy {
    None,
    MaskUnmapped,
    /// Schema only; the band arithmetic is not modeled.
    IcepopBand,
}

/// Sampled trajectory attributed to the revision that generated it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub record_id: String,
    pub policy_id: String,
    pub revision_id: String,
    pub token_count: u32,
    /// Selected expert ids per token; `None` or a missing tail entry means no route.
    pub route_metadata: Vec<Option<Vec<u32>>>,
    pub correction_policy: CorrectionPolicy,
    #[serde(default)]
    pub backend: Option<String>,
    pub mask: Vec<bool>,
}

impl RolloutRecord {
    pub fn new(
        record_id: String,
        policy_id: String,
        revision_id: String,
        token_count: u32,
        route_metadata: Vec<Option<Vec<u32>>>,
        correction_policy: CorrectionPolicy,
    ) -> Result<Self, LifecycleError> {
        if route_metadata.len() > token_count as usize {
            return Err(LifecycleError::InvalidRollout(format!(
                "{} route entries for {token_count} tokens",
                route_metadata.len()
            )));
        }
        let mask = (0..token_count as usize)
            .map(|i| {
                correction_policy == CorrectionPolicy::MaskUnmapped
                    && route_metadata.get(i).and_then(Option::as_ref).is_none()
            })
            .collect();
        Ok(Self {
            record_id,
            policy_id,
            revision_id,
            token_count,
            route_metadata,
            correction_policy,
            backend: None,
            mask,
        })
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadinessState {
    Absent,
    Registered,
    Prewarming,
    Ready,
    Retired,
}

impl fmt::Display for ReadinessState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReadinessState::Absent => "absent",
            ReadinessState::Registered => "registered",
            ReadinessState::Prewarming => "prewarming",
            ReadinessState::Ready => "ready",
            ReadinessState::Retired => "retired",
        })
    }
}

impl ReadinessState {
    pub fn can_transition(self, to: ReadinessState) -> bool {
        use ReadinessState::*;
        matches!(
            (self, to),
            (Absent, Registered) | (Registered, Prewarming) | (Prewarming, Ready) | (Ready, Retired) | (Registered, Retired)
        )
    }
}

/// Evidence that an actor finished activating a revision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationProof {
    pub actor_id: String,
    pub revision_id: String,
    pub activated_at: Millis,
    pub seal: u32,
}

impl ActivationProof {
    fn compute_seal(actor_id: &str, revision_id: &str, at: Millis) -> u32 {
        crc32(format!("{actor_id}\n{revision_id}\n{at}").as_bytes())
    }

    pub fn issue(actor_id: &str, revision_id: &str, activated_at: Millis) -> Self {
        Self {
            actor_id: actor_id.to_string(),
            revision_id: revision_id.to_string(),
            activated_at,
            seal: Self::compute_seal(actor_id, revision_id, activated_at),
        }
    }

    pub fn proves(&self, actor_id: &str, revision_id: &str) -> bool {
        self.actor_id == actor_id
            && self.revision_id == revision_id
            && self.seal == Self::compute_seal(actor_id, revision_id, self.activated_at)
    }
}

/// Readiness of one revision on one serving actor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadinessEntry {
    pub actor_id: String,
    pub revision_id: String,
    pub state: ReadinessState,
    pub transitioned_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proof: Option<ActivationProof>,
}

impl ReadinessEntry {
    pub fn absent(actor_id: impl Into<String>, revision_id: impl Into<String>) -> Self {
        Self {
            actor_id: actor_id.into(),
            revision_id: revision_id.into(),
            state: ReadinessState::Absent,
            transitioned_at: 0,
            proof: None,
        }
    }

    /// Applies one forward edge. `ready` additionally needs a matching proof.
    pub fn transition(&mut self, to: ReadinessState, now: Millis, proof: Option<&ActivationProof>) -> Result<(), LifecycleError> {
        if !self.state.can_transition(to) {
            return Err(LifecycleError::IllegalTransition { from: self.state, to });
        }
        if to == ReadinessState::Ready {
            match proof {
                Some(p) if p.proves(&self.actor_id, &self.revision_id) => self.proof = Some(p.clone()),
                _ => {
                    return Err(LifecycleError::MissingActivationProof {
                        actor: self.actor_id.clone(),
                        revision: self.revision_id.clone(),
                    })
                }
            }
        }
        self.state = to;
        self.transitioned_at = now;
        Ok(())
    }
}
