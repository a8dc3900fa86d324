use std::fs;
use std::sync::Arc;

use lorafleet::lifecycle::PolicyService;
use lorafleet::metastore::{ManualClock, Metastore};
use lorafleet_core::lifecycle::{
    ActivationProof, ActorDescriptor, AdapterShape, CorrectionPolicy, ReadinessState, ShapeLimits,
    DEFAULT_SESSION_LEASE_MS,
};
use lorafleet_core::packfmt::{LayoutParams, SyntheticAdapter};

fn service(dir: &std::path::Path, clock: &ManualClock) -> PolicyService {
    let store = Arc::new(Metastore::recover(dir, Arc::new(clock.clone())).unwrap().0);
    PolicyService::open(store, 7)
}

fn shape() -> AdapterShape {
    AdapterShape::new(4, ["q_proj", "v_proj"]).unwrap()
}

#[test]
fn one_session_per_policy_until_release_or_expiry() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::at(0);
    let svc = service(dir.path(), &clock);
    let p = svc.create_policy("base", shape()).unwrap().policy_id;
    let a = svc.acquire_session(&p, "w1").unwrap();
    assert_eq!(svc.acquire_session(&p, "w2").unwrap_err().code(), "session_held");
    svc.release_session(&p, &a.token, None).unwrap();
    let b = svc.acquire_session(&p, "w2").unwrap();
    clock.advance(DEFAULT_SESSION_LEASE_MS + 1);
    let c = svc.acquire_session(&p, "w3").unwrap();
    assert_ne!(b.token, c.token);
    assert_eq!(svc.renew_session(&p, &b.token).unwrap_err().code(), "no_session");
}

#[test]
fn export_is_idempotent_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::at(0);
    let (m, p) = SyntheticAdapter::tiny(LayoutParams::new(2, 4, 2, 5)).build(3);
    let (policy, rev) = {
        let svc = service(dir.path(), &clock);
        let policy = svc.create_policy("base", shape()).unwrap().policy_id;
        let lease = svc.acquire_session(&policy, "w").unwrap();
        let r1 = svc.export_revision(&policy, &lease.token, 10, &m, &p).unwrap();
        let r2 = svc.export_revision(&policy, &lease.token, 10, &m, &p).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(svc.store().len(), 3, "policy, session, one revision");
        (policy, r1)
    };
    let svc = service(dir.path(), &clock);
    assert_eq!(svc.revisions_of(&policy), vec![rev.clone()]);
    assert_eq!(svc.resolve(&policy, None).unwrap(), rev);
    assert_eq!(svc.view(&policy).unwrap().revisions.len(), 1);

    // Tampering with the stored object is detected on read.
    let path = svc.store().resolve_ref(&rev.file_ref);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert_eq!(svc.read_revision_file(&rev.revision_id).unwrap_err().code(), "artifact_changed");
}

#[test]
fn export_requires_the_live_session() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), &ManualClock::at(0));
    let policy = svc.create_policy("base", shape()).unwrap().policy_id;
    let (m, p) = SyntheticAdapter::tiny(LayoutParams::new(1, 2, 1, 2)).build(1);
    assert_eq!(svc.export_revision(&policy, "sess-forged", 1, &m, &p).unwrap_err().code(), "no_session");
    assert!(svc.revisions_of(&policy).is_empty());
}

#[test]
fn readiness_needs_proof_and_compatibility_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), &ManualClock::at(5));
    let policy = svc.create_policy("base", shape()).unwrap().policy_id;
    let lease = svc.acquire_session(&policy, "w").unwrap();
    let (m, p) = SyntheticAdapter::tiny(LayoutParams::new(1, 2, 1, 2)).build(1);
    let rev = svc.export_revision(&policy, &lease.token, 1, &m, &p).unwrap().revision_id;

    let fits = ActorDescriptor::new("a1", "base", ShapeLimits::new(8, ["q_proj", "v_proj", "o_proj"]));
    assert!(svc.check_compatibility(&rev, &fits).unwrap().is_ok());
    let small = ActorDescriptor::new("a2", "base", ShapeLimits::new(2, ["q_proj", "v_proj"]));
    assert_eq!(svc.check_compatibility(&rev, &small).unwrap().unwrap_err().code(), "rank_exceeds_limit");
    let other = ActorDescriptor::new("a3", "other", ShapeLimits::new(8, ["q_proj", "v_proj"]));
    assert_eq!(svc.check_compatibility(&rev, &other).unwrap().unwrap_err().code(), "base_mismatch");

    svc.transition_readiness("a1", &rev, ReadinessState::Registered, None).unwrap();
    assert_eq!(
        svc.transition_readiness("a1", &rev, ReadinessState::Ready, None).unwrap_err().code(),
        "illegal_transition"
    );
    svc.transition_readiness("a1", &rev, ReadinessState::Prewarming, None).unwrap();
    assert_eq!(
        svc.transition_readiness("a1", &rev, ReadinessState::Ready, None).unwrap_err().code(),
        "missing_activation_proof"
    );
    let proof = ActivationProof::issue("a1", &rev, 6);
    assert_eq!(svc.transition_readiness("a1", &rev, ReadinessState::Ready, Some(&proof)).unwrap().state, ReadinessState::Ready);
}

#[test]
fn rollouts_attach_to_their_own_revision() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::at(0);
    let svc = service(dir.path(), &clock);
    let a = svc.create_policy("base", shape()).unwrap().policy_id;
    let b = svc.create_policy("base", shape()).unwrap().policy_id;
    let lease = svc.acquire_session(&a, "w").unwrap();
    let (m, p) = SyntheticAdapter::tiny(LayoutParams::new(1, 2, 1, 2)).build(1);
    let rev = svc.export_revision(&a, &lease.token, 1, &m, &p).unwrap().revision_id;
    assert_eq!(svc.record_rollout(&b, &rev, 3, vec![], CorrectionPolicy::None).unwrap_err().code(), "unknown_revision");
    let rec = svc.record_rollout(&a, &rev, 3, vec![Some(vec![1]), None], CorrectionPolicy::MaskUnmapped).unwrap();
    assert_eq!(rec.masked_count(), 2);
    drop(svc);
    let svc = service(dir.path(), &clock);
    assert_eq!(svc.rollout(&rec.record_id).unwrap(), rec);
}
