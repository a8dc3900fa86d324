//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line regardless of output capture.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use lorafleet::catalog::{audit_catalog, build_catalog, CatalogLayout, CatalogTemplate};
use lorafleet::lifecycle::PolicyService;
use lorafleet::metastore::{CrashPoint, ManualClock, Metastore};
use lorafleet_core::lifecycle::{AdapterShape, ShapeLimits};
use lorafleet_core::loadgen::{
    build_scenario, cohort_metrics, compute_metrics, fleet_size, FleetInputs, MetricsOptions, RolloutMode, TrafficKind,
    TrafficSpec,
};
use lorafleet_core::packfmt::{pack, unpack, DType, LayoutParams, PackedFile, SyntheticAdapter};
use lorafleet_core::servesim::{
    run_scenario, AdmissionPolicy, LatencyModel, LoadState, Request, RevisionSpec, Scenario, ServeConfig, SimOutput, Target, TracePath,
};
use lorafleet_core::trainersim::{
    export_from_shards, reference_plans, shard_adapter, simulate_schedule, Resources, ScheduleMode, StateDigests,
    TrainerWorker,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn fanout_37k() -> Outcome {
    let (l, e, p, o) = (48u64, 128u64, 3u64, 384u64);
    let gen = SyntheticAdapter::tiny(LayoutParams::new(l as u32, e as u32, p as u32, o as u32));
    let (m, payloads) = gen.build(1);
    ensure!(payloads.values().all(|b| b.len() == 4), "payloads are not 4 bytes");
    let want_tensors = l * e * p * 2 + o;
    let want_groups = l * p * 2;
    let want_keys = want_groups + o;
    ensure!(m.tensors.len() as u64 == want_tensors, "manifest has {} tensors, want {want_tensors}", m.tensors.len());
    let file = pack(&m, &payloads).map_err(|e| e.to_string())?;
    let reparsed = PackedFile::parse(file.into_bytes()).map_err(|e| e.to_string())?;
    let audit = lorafleet_core::packfmt::audit_packed(&reparsed, 16, 0);
    ensure!(reparsed.key_count() as u64 == want_keys, "{} keys, want {want_keys}", reparsed.key_count());
    ensure!(audit.groups as u64 == want_groups, "{} groups, want {want_groups}", audit.groups);
    ensure!(audit.copied as u64 == o, "{} copied, want {o}", audit.copied);
    ensure!(audit.is_clean(), "audit errors: {:?}", audit.errors);
    Ok(format!("{} -> {} keys, {} groups, {} copied", m.tensors.len(), audit.keys, audit.groups, audit.copied))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dtypes = [DType::F32, DType::Bf16, DType::F16, DType::U8];
    for case in 0..200 {
        let layout = LayoutParams::new(rng.random_range(0..=8), rng.random_range(0..=8), rng.random_range(0..=8), rng.random_range(0..=8));
        let mut gen = SyntheticAdapter::tiny(layout);
        gen.dtype = dtypes[rng.random_range(0..dtypes.len())];
        gen.expert_shape = vec![rng.random_range(1..4), rng.random_range(1..4)];
        gen.other_shape = vec![rng.random_range(1..4), rng.random_range(1..4)];
        gen.shared_expert = rng.random_bool(0.5);
        let (m, p) = gen.build(rng.random());
        if m.tensors.is_empty() {
            continue;
        }
        let first = pack(&m, &p).map_err(|e| format!("case {case}: {e}"))?;
        let parsed = PackedFile::parse(first.as_bytes().to_vec()).map_err(|e| format!("case {case}: {e}"))?;
        let (m2, p2) = unpack(&parsed).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(m2 == m.canonical(), "case {case}: manifest differs");
        ensure!(p2 == p, "case {case}: payload bytes differ");
        let again = pack(&m2, &p2).map_err(|e| e.to_string())?;
        ensure!(again.as_bytes() == first.as_bytes(), "case {case}: repack not byte-identical");
    }
    Ok("200 manifests lossless".into())
}

fn catalog_10k() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let layout = CatalogLayout::new(dir.path().join("catalog"), 100, 100);
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4);
    let report = build_catalog(&layout, &CatalogTemplate::default(), threads, 3, None).map_err(|e| e.to_string())?;
    ensure!(report.built_count == 10_000, "built {}", report.built_count);
    ensure!(report.error_count == 0, "{} build errors", report.error_count);
    let audit = audit_catalog(&layout.root, 256, 3, 16).map_err(|e| e.to_string())?;
    ensure!(audit.samples == 256 && audit.ok == 256, "audit {}/{}", audit.ok, audit.samples);
    ensure!(audit.shards_covered == 100, "covered {} shards", audit.shards_covered);
    Ok(format!("10000 built, audit {}/{} across {} shards", audit.ok, audit.samples, audit.shards_covered))
}

fn crash_visibility() -> Outcome {
    let shape = AdapterShape::new(2, ["q_proj", "v_proj"]).map_err(|e| e.to_string())?;
    let (m, p) = SyntheticAdapter::tiny(LayoutParams::new(2, 4, 2, 5)).build(9);
    let mut summary = Vec::new();
    for point in CrashPoint::ALL {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let clock = Arc::new(ManualClock::at(1_000));
        let store = Arc::new(Metastore::open(dir.path(), clock.clone()).map_err(|e| e.to_string())?);
        let svc = PolicyService::open(store.clone(), 1);
        let policy = svc.create_policy("base", shape.clone()).map_err(|e| e.to_string())?.policy_id;
        let lease = svc.acquire_session(&policy, "trainer-0").map_err(|e| e.to_string())?;
        store.inject_crash(Some(point));
        ensure!(svc.export_revision(&policy, &lease.token, 7, &m, &p).is_err(), "{point:?}: export survived the crash");
        drop(svc);
        drop(store);

        let (store, _) = Metastore::recover(dir.path(), clock.clone()).map_err(|e| format!("{point:?}: {e}"))?;
        let svc = PolicyService::open(Arc::new(store), 1);
        let visible = svc.revisions_of(&policy);
        ensure!(visible.len() <= 1, "{point:?}: {} visible revisions", visible.len());
        for rev in &visible {
            let bytes = svc.read_revision_file(&rev.revision_id).map_err(|e| format!("{point:?}: visible but unreadable: {e}"))?;
            let file = PackedFile::parse(bytes).map_err(|e| format!("{point:?}: {e}"))?;
            let (m2, p2) = unpack(&file).map_err(|e| format!("{point:?}: {e}"))?;
            ensure!(m2 == m.canonical() && p2 == p, "{point:?}: visible artifact differs");
        }
        match svc.resolve(&policy, None) {
            Ok(r) => ensure!(visible.iter().any(|v| v.revision_id == r.revision_id), "{point:?}: resolved an invisible revision"),
            Err(_) => ensure!(visible.is_empty(), "{point:?}: visible revision not resolvable"),
        }
        let before = visible.len();
        svc.export_revision(&policy, &lease.token, 7, &m, &p).map_err(|e| format!("{point:?}: retry failed: {e}"))?;
        ensure!(svc.revisions_of(&policy).len() == 1, "{point:?}: retry left {} revisions", svc.revisions_of(&policy).len());
        summary.push(format!("{point:?}={before}"));
    }
    Ok(format!("{} points; visible after crash: {}", CrashPoint::ALL.len(), summary.join(" ")))
}

fn cold(n: usize) -> Vec<RevisionSpec> {
    (0..n).map(|i| RevisionSpec::new(format!("rev/cold-{i}"), format!("cold-{i}"))).collect()
}

fn simulate(config: ServeConfig, revisions: Vec<RevisionSpec>, requests: Vec<Request>) -> Result<SimOutput, String> {
    run_scenario(&Scenario { config, revisions, requests, ..Default::default() }).map_err(|e| e.to_string())
}

fn request(id: u64, policy: String) -> Request {
    Request::new(id, Target::Policy(policy), 0)
}

fn staircase() -> Outcome {
    let latency = LatencyModel::default();
    let slice = latency.load_slice_ms();
    ensure!(slice == 1360, "load slice {slice} ms");
    // Admission control off: loads hold the engine back to back.
    let cfg = ServeConfig { max_inflight: 1, queue_depth: 15, admission: AdmissionPolicy::Unlimited, ..Default::default() };
    let out = simulate(cfg, cold(16), (0..16).map(|i| request(i, format!("cold-{i}"))).collect())?;
    let mut ends: Vec<u64> = out.load_jobs.iter().filter_map(|j| j.end_ms).collect();
    ends.sort_unstable();
    ensure!(ends.len() == 16, "{} loads completed", ends.len());
    for (j, end) in ends.iter().enumerate() {
        let want = (j as u64 + 1) * 1360;
        ensure!(end.abs_diff(want) <= 1, "completion {} at {end} ms, want {want}", j + 1);
    }
    let last = ends[15];
    ensure!((1_375..=23_267).contains(&last), "16th completion {last} ms outside envelope");
    Ok(format!("16th completion at {last} ms"))
}

fn single_flight() -> Outcome {
    let out = simulate(ServeConfig::default(), cold(1), (0..8).map(|i| request(i, "cold-0".into())).collect())?;
    ensure!(out.load_jobs.len() == 1, "{} load jobs for one revision", out.load_jobs.len());
    ensure!(out.traces.len() == 8, "{} of 8 requests finished", out.traces.len());
    let cfg = ServeConfig { max_inflight: 1, queue_depth: 1, ..Default::default() };
    let out = simulate(cfg, cold(4), (0..4).map(|i| request(i, format!("cold-{i}"))).collect())?;
    let loaded = out.load_jobs.iter().filter(|j| j.state == LoadState::Done).count();
    let rejected = out.traces.iter().filter(|t| t.path == TracePath::Rejected).count();
    ensure!(loaded == 2 && rejected == 2, "burst loaded {loaded}, rejected {rejected}");
    Ok("1 load job for 8 waiters; M=1,Q=1 burst loads 2 rejects 2".into())
}

fn batch_window() -> Outcome {
    let revisions = (0..128).map(|i| RevisionSpec::new(format!("rev/w-{i}"), format!("w-{i}")).warm()).collect();
    let cfg = ServeConfig::default();
    ensure!(cfg.gpu_slots == 64, "default batch window {}", cfg.gpu_slots);
    let out = simulate(cfg, revisions, (0..128).map(|i| request(i, format!("w-{i}"))).collect())?;
    let max = out
        .batches
        .iter()
        .map(|b| b.distinct_adapters)
        .max()
        .unwrap_or(0);
    ensure!(max == 64, "max distinct per batch {max}");
    let done = out.traces.iter().filter(|t| t.path != TracePath::Rejected).count();
    ensure!(done == 128, "{done} of 128 completed");
    Ok(format!("max distinct per batch {max}, 128/128 complete"))
}

fn hot_reload(mode: RolloutMode) -> Result<SimOutput, String> {
    let spec = TrafficSpec::new(
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
    );
    let cfg = ServeConfig { max_inflight: 4, queue_depth: 16, ..Default::default() };
    let sc = build_scenario(&spec, &cfg).map_err(|e| e.to_string())?;
    run_scenario(&sc).map_err(|e| e.to_string())
}

fn two_phase() -> Outcome {
    let opts = MetricsOptions { stall_ms: 20_000, ..Default::default() };
    let out = hot_reload(RolloutMode::Immediate)?;
    let warm = cohort_metrics(&out.traces, "warm", &opts);
    let new = cohort_metrics(&out.traces, "new", &opts);
    let user_loads = new.path_count(TracePath::ColdLoad);
    ensure!(warm.stalls_over_threshold >= 1, "immediate: {} warm stalls", warm.stalls_over_threshold);
    ensure!(user_loads > 0, "immediate: no user-visible loads");
    let imm = warm.stalls_over_threshold;

    let out = hot_reload(RolloutMode::Admitted)?;
    let warm = cohort_metrics(&out.traces, "warm", &opts);
    let new_waits = out.traces.iter().filter(|t| t.cohort == "new" && t.load_ms > 0).count();
    ensure!(warm.stalls_over_threshold == 0, "admitted: {} warm stalls", warm.stalls_over_threshold);
    ensure!(new_waits > 0, "admitted: no new-user load wait");

    let out = hot_reload(RolloutMode::TwoPhase)?;
    let warm = cohort_metrics(&out.traces, "warm", &opts);
    let all = compute_metrics(&out.traces, &opts);
    ensure!(warm.stalls_over_threshold == 0, "two-phase: {} warm stalls", warm.stalls_over_threshold);
    let ready = all.load_by_path.get("ready_path").ok_or("two-phase: no ready-path traces")?;
    ensure!(ready.p95 == 0, "two-phase ready-path load p95 {}", ready.p95);
    ensure!(all.path_count(TracePath::ColdLoad) == 0, "two-phase: cold loads on the user path");
    let span = out.prewarm.as_ref().map(|p| p.span_ms).unwrap_or(0);
    ensure!(span > 0, "two-phase: no prewarm span");
    Ok(format!("immediate {imm} warm stalls; admitted 0; two-phase 0, ready p95 0 ms, prewarm span {span} ms"))
}

fn knee() -> Outcome {
    let mu = 10.0;
    let duration = 600.0;
    let cfg = ServeConfig {
        max_batch_requests: 1,
        output_tokens: 1,
        latency: LatencyModel { prefill_ms: 0, decode_ms: 100, ..Default::default() },
        ..Default::default()
    };
    let mut rows = Vec::new();
    for factor in [0.25, 0.5, 1.5] {
        let target = factor * mu;
        let spec = TrafficSpec::new(TrafficKind::Poisson { rate_rps: target, duration_s: duration, adapters: 16 }, 3);
        let sc = build_scenario(&spec, &cfg).map_err(|e| e.to_string())?;
        let out = run_scenario(&sc).map_err(|e| e.to_string())?;
        let m = compute_metrics(&out.traces, &MetricsOptions { window_ms: (duration * 1000.0) as u64, ..Default::default() });
        if factor < 1.0 {
            ensure!(m.slo_attainment == 1.0, "{target} rps: attainment {}", m.slo_attainment);
            ensure!((m.achieved_rps - target).abs() / target <= 0.1, "{target} rps: achieved {}", m.achieved_rps);
        } else {
            ensure!(m.slo_attainment < 1.0, "{target} rps above capacity still at full attainment");
        }
        rows.push(format!("{target}rps:{:.3}", m.slo_attainment));
    }
    Ok(rows.join(" "))
}

fn trainer() -> Outcome {
    const MODULES: [&str; 4] = ["down", "gate", "o_proj", "up"];
    let shapes: Vec<AdapterShape> = (0..6)
        .map(|i| AdapterShape::new([1, 2, 4, 8, 16, 16][i], MODULES.iter().copied().take(1 + i % 4)).unwrap())
        .collect();
    let mut w = TrainerWorker::new("t0", "base", 1 << 20, ShapeLimits::new(16, MODULES), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut expected: BTreeMap<String, StateDigests> = BTreeMap::new();
    w.attach("policy/0", "tok", &shapes[0]).map_err(|e| e.to_string())?;
    let mut switches = 0;
    while switches < 1_000 {
        for _ in 0..rng.random_range(0..3) {
            w.run_update("tok", rng.random()).map_err(|e| e.to_string())?;
            ensure!(w.inactive_region_is_zero(), "padding dirty after update");
        }
        let from = w.active_policy().unwrap().to_string();
        let to_idx = rng.random_range(0..shapes.len());
        let to = format!("policy/{to_idx}");
        if to == from {
            continue;
        }
        let before = w.active_state().unwrap().digests();
        let report = w.switch_policy(&to, "tok", &shapes[to_idx]).map_err(|e| e.to_string())?;
        ensure!(report.saved == before, "saved digests differ from live state at switch {switches}");
        expected.insert(from, before);
        if let Some(want) = expected.get(&to) {
            ensure!(&w.active_state().unwrap().digests() == want, "restored state of {to} differs at switch {switches}");
        }
        ensure!(w.inactive_region_is_zero(), "padding dirty after switch {switches}");
        switches += 1;
    }

    let res = Resources { trainers: 1, samplers: 1, base_resident_bytes: 8 << 30, slot_bytes: 64 << 20 };
    let plans = reference_plans("4b").ok_or("no 4b plan")?;
    let seq = simulate_schedule(&plans, ScheduleMode::Sequential, &res);
    let con = simulate_schedule(&plans, ScheduleMode::Concurrent, &res);
    let speedup = seq.wall_time_ms as f64 / con.wall_time_ms as f64;
    ensure!((1.5..=2.0).contains(&speedup), "speedup {speedup:.3}");
    ensure!(seq.peak_resident_bytes == con.peak_resident_bytes, "peak resident bytes differ");
    Ok(format!("1000 switches preserved, padding zero, 4b speedup {speedup:.3}"))
}

fn sharded_export() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for tp in [1u32, 2, 4] {
        for ep in [1u32, 2, 4] {
            for _ in 0..4 {
                let mut gen = SyntheticAdapter::tiny(LayoutParams::new(
                    rng.random_range(1..4),
                    rng.random_range(1..9),
                    2,
                    rng.random_range(0..24),
                ));
                gen.other_shape = vec![4, 2];
                gen.shared_expert = true;
                let (m, p) = gen.build(rng.random());
                let out = export_from_shards(&shard_adapter(&m, &p, tp, ep)).map_err(|e| e.to_string())?;
                ensure!(out.manifest.tensors == m.tensors, "tp={tp} ep={ep}: manifest differs");
                ensure!(out.payloads == p, "tp={tp} ep={ep}: payloads differ");
                let packed_ref = pack(&m, &p).map_err(|e| e.to_string())?;
                let packed_out = pack(&out.manifest, &out.payloads).map_err(|e| e.to_string())?;
                ensure!(packed_ref.as_bytes() == packed_out.as_bytes(), "tp={tp} ep={ep}: packed bytes differ");
                let shared = m.tensors.iter().filter(|t| t.name.contains(".shared_expert.")).count();
                ensure!(out.shared_copies_deduplicated == shared * (ep as usize - 1), "tp={tp} ep={ep}: dedup count");
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} shardings byte-identical"))
}

fn fleet() -> Outcome {
    let inputs = FleetInputs::default();
    let rows = fleet_size(&inputs);
    let per = inputs.gpus_per_engine;
    let placement = inputs.active_wave.div_ceil(inputs.gpu_slots);
    // 38.3 / 0.7 in tenths, rounded up.
    let cold_rate = 383u64.div_ceil(7);
    let burst = inputs.active_wave.div_ceil(inputs.cold_cap_per_engine);
    let have: Vec<(u64, u64)> = rows.iter().map(|r| (r.engines, r.gpus)).collect();
    for want in [(36, 144), (55, 220), (72, 288)] {
        ensure!(have.contains(&want), "row {want:?} missing from {have:?}");
    }
    for engines in [placement, cold_rate, burst] {
        ensure!(have.contains(&(engines, engines * per)), "oracle row {engines} missing from {have:?}");
    }
    Ok("36/144, 55/220, 72/288".into())
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("packing fanout 37,248 -> 672", Duration::from_secs(30), fanout_37k),
        ("round-trip losslessness", Duration::from_secs(60), round_trips),
        ("catalog build + audit 10k/100 shards", Duration::from_secs(300), catalog_10k),
        ("visibility under crash", Duration::from_secs(120), crash_visibility),
        ("cold staircase", Duration::from_secs(10), staircase),
        ("single-flight + backpressure", Duration::from_secs(10), single_flight),
        ("batch window", Duration::from_secs(10), batch_window),
        ("two-phase readiness", Duration::from_secs(60), two_phase),
        ("open-loop knee", Duration::from_secs(60), knee),
        ("trainer state swap and schedule", Duration::from_secs(60), trainer),
        ("sharded export equivalence", Duration::from_secs(60), sharded_export),
        ("fleet arithmetic", Duration::from_secs(1), fleet),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2}: {name} ({detail}) [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2}: {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
