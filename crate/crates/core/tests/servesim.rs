use lorafleet_core::servesim::{
    run_scenario, AdmissionPolicy, LatencyModel, LoadState, Request, RetryPolicy, RevisionSpec, Scenario, ServeConfig,
    SimOutput, Target, TracePath,
};
use proptest::prelude::*;

fn cold_revisions(n: usize) -> Vec<RevisionSpec> {
    (0..n).map(|i| RevisionSpec::new(format!("rev/cold-{i}"), format!("cold-{i}"))).collect()
}

fn warm_revisions(n: usize) -> Vec<RevisionSpec> {
    (0..n).map(|i| RevisionSpec::new(format!("rev/warm-{i}"), format!("warm-{i}")).warm()).collect()
}

fn policy_req(id: u64, policy: &str, at: u64) -> Request {
    Request::new(id, Target::Policy(policy.into()), at)
}

fn run(config: ServeConfig, revisions: Vec<RevisionSpec>, requests: Vec<Request>) -> SimOutput {
    run_scenario(&Scenario { config, revisions, requests, ..Default::default() }).unwrap()
}

fn staircase_config(admission: AdmissionPolicy) -> ServeConfig {
    ServeConfig { max_inflight: 1, queue_depth: 15, admission, ..Default::default() }
}

#[test]
fn staircase_completions_step_by_one_slice() {
    let reqs = (0..16).map(|i| policy_req(i, &format!("cold-{i}"), 0)).collect();
    let out = run(staircase_config(AdmissionPolicy::Unlimited), cold_revisions(16), reqs);
    let slice = LatencyModel::default().load_slice_ms();
    assert_eq!(slice, 1360);
    let mut ends: Vec<u64> = out.load_jobs.iter().map(|j| j.end_ms.unwrap()).collect();
    ends.sort();
    for (j, end) in ends.iter().enumerate() {
        assert!(end.abs_diff((j as u64 + 1) * slice) <= 1, "load {} ended at {end}", j + 1);
    }
    assert_eq!(*ends.last().unwrap(), 21_760);
    assert_eq!(out.stats.peak_loading, 1);
    assert!(out.traces.iter().all(|t| t.path == TracePath::ColdLoad));
}

#[test]
fn single_flight_joins_waiters() {
    let reqs = (0..8).map(|i| policy_req(i, "cold-0", 0)).collect();
    let out = run(ServeConfig::default(), cold_revisions(1), reqs);
    assert_eq!(out.load_jobs.len(), 1);
    assert_eq!(out.load_jobs[0].waiters.len(), 8);
    assert_eq!(out.traces.len(), 8);
    assert!(out.traces.iter().all(|t| t.load_ms == 1360));
}

#[test]
fn m1_q1_burst_loads_two_rejects_two() {
    let cfg = ServeConfig { max_inflight: 1, queue_depth: 1, ..Default::default() };
    let reqs = (0..4).map(|i| policy_req(i, &format!("cold-{i}"), 0)).collect();
    let out = run(cfg, cold_revisions(4), reqs);
    assert_eq!(out.load_jobs.len(), 2);
    assert!(out.load_jobs.iter().all(|j| j.state == LoadState::Done));
    let rejected: Vec<_> = out.traces.iter().filter(|t| t.path == TracePath::Rejected).collect();
    assert_eq!(rejected.len(), 2);
    assert!(rejected.iter().all(|t| t.reject_code.as_deref() == Some("cold_load_rejected")));
}

#[test]
fn batch_window_caps_distinct_adapters() {
    let reqs = (0..128).map(|i| policy_req(i, &format!("warm-{i}"), 0)).collect();
    let out = run(ServeConfig::default(), warm_revisions(128), reqs);
    let oracle_max = out.batches.iter().map(|b| b.distinct_adapters).max().unwrap();
    assert_eq!(oracle_max, 64);
    assert_eq!(out.stats.max_batch_distinct, 64);
    assert_eq!(out.traces.len(), 128);
    assert!(out.traces.iter().all(|t| t.path == TracePath::CpuPromote));

    // 64 distinct fit in one batch
    let reqs = (0..64).map(|i| policy_req(i, &format!("warm-{i}"), 0)).collect();
    let out = run(ServeConfig::default(), warm_revisions(64), reqs);
    assert_eq!(out.batches[0].distinct_adapters, 64);
    assert_eq!(out.batches[0].joiners, 64);
}

#[test]
fn warm_only_ttft_is_prefill_plus_decode() {
    let out = run(ServeConfig::default(), warm_revisions(1), vec![policy_req(0, "warm-0", 5)]);
    let l = LatencyModel::default();
    assert_eq!(out.traces[0].ttft_ms, l.prefill_ms + l.decode_ms);
    assert_eq!(out.traces[0].e2e_ms, l.prefill_ms + 64 * l.decode_ms);
}

#[test]
fn unlimited_admission_delays_warm_by_every_queued_slice() {
    let mut reqs: Vec<Request> = (0..16).map(|i| policy_req(i, &format!("cold-{i}"), 0)).collect();
    reqs.push(policy_req(100, "warm-0", 10).cohort("warm"));
    let mut revs = cold_revisions(16);
    revs.extend(warm_revisions(1));
    let l = LatencyModel::default();

    let out = run(staircase_config(AdmissionPolicy::Unlimited), revs.clone(), reqs.clone());
    let warm = out.traces.iter().find(|t| t.request_id == 100).unwrap();
    // All 16 slices run back to back, then one step admits all 17 requests.
    let oracle = 16 * l.load_slice_ms() + l.decode_ms + 17 * l.prefill_ms - 10;
    assert_eq!(warm.ttft_ms, oracle);

    let out = run(staircase_config(AdmissionPolicy::Fixed { cap: 1 }), revs, reqs);
    let warm = out.traces.iter().find(|t| t.request_id == 100).unwrap();
    // One slice, then a step with the warm request and the first cold one.
    assert_eq!(warm.ttft_ms, l.load_slice_ms() + l.decode_ms + 2 * l.prefill_ms - 10);
}

#[test]
fn gating_rejects_until_prewarm_then_ready_path() {
    let cfg = ServeConfig {
        gating: true,
        retry: Some(RetryPolicy { backoff_ms: 500, max_attempts: 100 }),
        ..Default::default()
    };
    let mut revs = warm_revisions(2);
    revs.extend(cold_revisions(4).into_iter().map(|r| r.registered_at(1_000)));
    let mut reqs: Vec<Request> = (0..4).map(|i| policy_req(i, &format!("cold-{i}"), 1_000)).collect();
    reqs.push(policy_req(10, "warm-1", 1_200));
    let out = run_scenario(&Scenario {
        config: cfg,
        revisions: revs,
        prewarm_at_ms: Some(1_000),
        prewarm: (0..4).map(|i| format!("rev/cold-{i}")).collect(),
        requests: reqs,
    })
    .unwrap();
    assert!(out.traces.iter().all(|t| t.path != TracePath::ColdLoad));
    let ready: Vec<_> = out.traces.iter().filter(|t| t.path == TracePath::ReadyPath).collect();
    assert_eq!(ready.len(), 4);
    assert!(ready.iter().all(|t| t.load_ms == 0));
    assert!(out.traces.iter().any(|t| t.reject_code.as_deref() == Some("not_ready")));
    let report = out.prewarm.unwrap();
    assert!(report.activated_ms.values().all(|v| v.is_some()));
    assert!(report.span_ms >= 4 * 1360);
}

#[test]
fn unknown_policy_is_not_retried() {
    let cfg = ServeConfig { retry: Some(RetryPolicy { backoff_ms: 10, max_attempts: 5 }), ..Default::default() };
    let out = run(cfg, vec![], vec![policy_req(0, "nobody", 0)]);
    assert_eq!(out.traces.len(), 1);
    assert_eq!(out.traces[0].reject_code.as_deref(), Some("unknown_policy"));
}

#[test]
fn same_seed_same_trace() {
    let reqs: Vec<Request> = (0..50).map(|i| policy_req(i, &format!("cold-{}", i % 7), i * 37)).collect();
    let a = run(ServeConfig::default(), cold_revisions(7), reqs.clone());
    let b = run(ServeConfig::default(), cold_revisions(7), reqs);
    assert_eq!(a, b);
}

fn arb_scenario() -> impl Strategy<Value = (ServeConfig, Vec<RevisionSpec>, Vec<Request>)> {
    (
        1usize..4,
        0usize..4,
        1usize..6,
        2usize..10,
        prop::collection::vec((0usize..16, 0u64..5_000), 1..60),
        prop_oneof![Just(AdmissionPolicy::Unlimited), (1usize..3).prop_map(|cap| AdmissionPolicy::Fixed { cap })],
    )
        .prop_map(|(m, q, g, c, reqs, admission)| {
            let cfg = ServeConfig {
                max_inflight: m,
                queue_depth: q,
                gpu_slots: g,
                cpu_entries: c,
                admission,
                output_tokens: 4,
                ..Default::default()
            };
            let mut revs = cold_revisions(12);
            revs.extend(warm_revisions(4).into_iter().take(c.min(4)));
            let reqs = reqs
                .into_iter()
                .enumerate()
                .map(|(i, (p, at))| {
                    let name = if p < 12 { format!("cold-{p}") } else { format!("warm-{}", p - 12) };
                    policy_req(i as u64, &name, at)
                })
                .collect();
            (cfg, revs, reqs)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn serving_invariants_hold((cfg, revs, reqs) in arb_scenario()) {
        let submitted = reqs.len();
        let out = run(cfg.clone(), revs, reqs);
        // conservation: every request ends exactly once
        prop_assert_eq!(out.traces.len(), submitted);
        let mut ids: Vec<u64> = out.traces.iter().map(|t| t.request_id).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), submitted);
        for t in &out.traces {
            prop_assert!(t.ttft_ms <= t.e2e_ms);
        }
        prop_assert!(out.batches.iter().all(|b| b.distinct_adapters <= cfg.gpu_slots));
        prop_assert!(out.stats.peak_loading <= cfg.max_inflight);
        prop_assert!(out.stats.peak_queued <= cfg.queue_depth);
        prop_assert!(out.cpu_resident.len() <= cfg.cpu_entries);
        // single flight: live intervals of jobs for one revision never overlap
        for a in &out.load_jobs {
            for b in &out.load_jobs {
                if a.job_id < b.job_id && a.revision_id == b.revision_id {
                    prop_assert!(a.end_ms.unwrap() <= b.enqueue_ms);
                }
            }
        }
    }
}
