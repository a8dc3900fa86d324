use lorafleet_core::loadgen::{
    build_scenario, cohort_metrics, compute_metrics, gen_trace, run_ladder, MetricsOptions, RolloutMode, TrafficKind,
    TrafficSpec,
};
use lorafleet_core::servesim::{
    run_scenario, AdmissionPolicy, LatencyModel, RequestTrace, ServeConfig, TracePath,
};
use proptest::prelude::*;

fn hot_reload(mode: RolloutMode) -> TrafficSpec {
    TrafficSpec::new(
        TrafficKind::HotReload {
            warm: 32,
            new: 16,
            warm_rate_rps: 2.0,
            duration_s: 120.0,
            reload_at_s: 30.0,
            new_requests: 3,
            new_gap_s: 20.0,
            mode,
        },
        11,
    )
}

fn reload_config() -> ServeConfig {
    ServeConfig { max_inflight: 4, queue_depth: 16, ..Default::default() }
}

#[test]
fn poisson_mean_gap_near_one_second() {
    let spec = TrafficSpec::new(TrafficKind::Poisson { rate_rps: 1.0, duration_s: 180.0, adapters: 8 }, 7);
    let reqs = gen_trace(&spec).unwrap();
    let mean = reqs.last().unwrap().arrival_ms as f64 / reqs.len() as f64 / 1000.0;
    assert!((mean - 1.0).abs() <= 0.1, "mean gap {mean}");
    assert_eq!(reqs, gen_trace(&spec).unwrap());
}

fn knee_config() -> ServeConfig {
    // One request per step, 100 ms per request: capacity 10 rps.
    ServeConfig {
        max_batch_requests: 1,
        output_tokens: 1,
        latency: LatencyModel { prefill_ms: 0, decode_ms: 100, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn open_loop_knee() {
    let mu = 10.0;
    let duration = 600.0;
    let mut rows = Vec::new();
    for factor in [0.25, 0.5, 1.5] {
        let spec = TrafficSpec::new(TrafficKind::Poisson { rate_rps: factor * mu, duration_s: duration, adapters: 16 }, 3);
        let sc = build_scenario(&spec, &knee_config()).unwrap();
        let out = run_scenario(&sc).unwrap();
        let opts = MetricsOptions { window_ms: (duration * 1000.0) as u64, ..Default::default() };
        rows.push((factor, compute_metrics(&out.traces, &opts)));
    }
    for (factor, m) in &rows {
        if *factor < 1.0 {
            assert_eq!(m.slo_attainment, 1.0);
            let target = factor * mu;
            assert!((m.achieved_rps - target).abs() / target <= 0.1, "{} vs {target}", m.achieved_rps);
        } else {
            assert!(m.slo_attainment < 1.0);
        }
    }
}

#[test]
fn hot_reload_three_modes() {
    let opts = MetricsOptions::default();
    let run = |mode| {
        let sc = build_scenario(&hot_reload(mode), &reload_config()).unwrap();
        run_scenario(&sc).unwrap()
    };

    let immediate = run(RolloutMode::Immediate);
    let warm = cohort_metrics(&immediate.traces, "warm", &opts);
    let new = cohort_metrics(&immediate.traces, "new", &opts);
    assert!(warm.stalls_over_threshold >= 1, "immediate warm stalls {}", warm.stalls_over_threshold);
    assert!(new.path_count(TracePath::ColdLoad) > 0);

    let admitted = run(RolloutMode::Admitted);
    let warm = cohort_metrics(&admitted.traces, "warm", &opts);
    let new = cohort_metrics(&admitted.traces, "new", &opts);
    assert_eq!(warm.stalls_over_threshold, 0);
    assert!(new.load.p95 > 0);

    let two = run(RolloutMode::TwoPhase);
    let warm = cohort_metrics(&two.traces, "warm", &opts);
    let all = compute_metrics(&two.traces, &opts);
    assert_eq!(warm.stalls_over_threshold, 0);
    assert_eq!(all.path_count(TracePath::ColdLoad), 0);
    let ready = all.load_by_path.get("ready_path").expect("ready-path traces");
    assert_eq!(ready.p95, 0);
    assert_eq!(all.path_count(TracePath::ReadyPath), 16);
    assert!(two.prewarm.unwrap().span_ms > 0);
}

#[test]
fn ladders_plateau_at_cache_capacity() {
    let cfg = ServeConfig { cpu_entries: 300, max_inflight: 4, queue_depth: 16, output_tokens: 4, ..Default::default() };
    let hot = TrafficSpec::new(TrafficKind::HotsetLadder { targets: vec![128, 256, 512], rounds: 2, concurrency: 8 }, 5);
    let uniq = TrafficSpec::new(TrafficKind::UniqueLadder { targets: vec![128, 256, 512], concurrency: 8 }, 5);
    let h: Vec<usize> = run_ladder(&hot, &cfg).unwrap().iter().map(|p| p.loaded_count).collect();
    let u: Vec<usize> = run_ladder(&uniq, &cfg).unwrap().iter().map(|p| p.loaded_count).collect();
    assert!(h.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(h, u);
    assert_eq!(h, vec![128, 256, 300]);
}

#[test]
fn admission_policies_all_complete() {
    for admission in [
        AdmissionPolicy::Unlimited,
        AdmissionPolicy::Fixed { cap: 2 },
        AdmissionPolicy::Adaptive { min_cap: 1, max_cap: 4, target_wait_ms: 500 },
    ] {
        let cfg = ServeConfig { admission, ..reload_config() };
        let sc = build_scenario(&hot_reload(RolloutMode::Admitted), &cfg).unwrap();
        let out = run_scenario(&sc).unwrap();
        assert_eq!(out.traces.len(), sc.requests.len());
    }
}

fn brute_percentile(values: &[u64], p: u32) -> u64 {
    // smallest v such that at least p% of values are <= v
    let n = values.len() as f64;
    let mut candidates = values.to_vec();
    candidates.sort();
    for v in candidates {
        let at_most = values.iter().filter(|&&x| x <= v).count() as f64;
        if at_most * 100.0 >= p as f64 * n {
            return v;
        }
    }
    0
}

fn arb_traces() -> impl Strategy<Value = Vec<RequestTrace>> {
    prop::collection::vec((0u64..30_000, 0u64..5_000, any::<bool>(), 0u64..100_000), 1..80).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (ttft, extra, rejected, arrival))| RequestTrace {
                request_id: i as u64,
                origin_id: i as u64,
                attempt: 0,
                policy: "p".into(),
                revision_id: None,
                cohort: String::new(),
                arrival_ms: arrival,
                path: if rejected { TracePath::Rejected } else { TracePath::CpuPromote },
                ttft_ms: ttft,
                e2e_ms: ttft + extra,
                load_ms: extra,
                reject_code: None,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn metrics_match_brute_force(traces in arb_traces()) {
        let opts = MetricsOptions::default();
        let m = compute_metrics(&traces, &opts);
        let done: Vec<&RequestTrace> = traces.iter().filter(|t| t.path != TracePath::Rejected).collect();
        let ttft: Vec<u64> = done.iter().map(|t| t.ttft_ms).collect();
        if !ttft.is_empty() {
            prop_assert_eq!(m.ttft.p50, brute_percentile(&ttft, 50));
            prop_assert_eq!(m.ttft.p95, brute_percentile(&ttft, 95));
            prop_assert_eq!(m.ttft.p99, brute_percentile(&ttft, 99));
        }
        prop_assert!(m.ttft.p50 <= m.ttft.p95 && m.ttft.p95 <= m.ttft.p99);
        let ok = done.iter().filter(|t| t.ttft_ms <= opts.slo_ms).count();
        prop_assert_eq!(m.slo_attainment, ok as f64 / traces.len() as f64);
        prop_assert!((0.0..=1.0).contains(&m.slo_attainment));
        prop_assert_eq!(m.stalls_over_threshold, done.iter().filter(|t| t.ttft_ms > opts.stall_ms).count());
        prop_assert_eq!(m.completed + m.rejects, m.submitted);
    }
}
