//! Traffic generators, metric reports and fleet-sizing arithmetic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::servesim::{
    run_scenario, AdmissionPolicy, ClientModel, Request, RequestTrace, RetryPolicy, RevisionSpec, Scenario, ServeConfig,
    ServeError, SimOutput, Target, TracePath,
};
use crate::Millis;

pub const DEFAULT_HOTSET_TARGETS: [usize; 5] = [128, 192, 256, 384, 512];
pub const DEFAULT_UNIQUE_TARGETS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// New adapters are selectable at once and load on first touch, uncapped.
    Immediate,
    /// Same, but at most one cold activation per engine round.
    Admitted,
    /// Background prewarm under the same cap; users see only ready revisions.
    TwoPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrafficKind {
    /// Each round requests every hotset name once in a fresh seeded order.
    HotsetLadder {
        #[serde(default = "default_hotset")]
        targets: Vec<usize>,
        rounds: usize,
        concurrency: usize,
    },
    /// Every request names an adapter no earlier request used.
    UniqueLadder {
        #[serde(default = "default_unique")]
        targets: Vec<usize>,
        concurrency: usize,
    },
    /// `count` distinct cold adapters requested at time zero.
    Staircase { count: usize },
    /// Open-loop Poisson arrivals spread uniformly over a warm set.
    Poisson { rate_rps: f64, duration_s: f64, adapters: usize },
    HotReload {
        warm: usize,
        new: usize,
        warm_rate_rps: f64,
        duration_s: f64,
        reload_at_s: f64,
        /// Requests per new adapter after reload, spaced by `new_gap_s`.
        new_requests: usize,
        new_gap_s: f64,
        mode: RolloutMode,
    },
}

fn default_hotset() -> Vec<usize> {
    DEFAULT_HOTSET_TARGETS.to_vec()
}

fn default_unique() -> Vec<usize> {
    DEFAULT_UNIQUE_TARGETS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    #[serde(flatten)]
    pub kind: TrafficKind,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LoadgenError {
    #[error("invalid traffic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Serve(#[from] ServeError),
}

impl LoadgenError {
    pub fn code(&self) -> &'static str {
        match self {
            LoadgenError::InvalidSpec(_) => "invalid_traffic_spec",
            LoadgenError::Serve(e) => e.code(),
        }
    }
}

fn secs(s: f64) -> Millis {
    libm::round(s * 1000.0) as Millis
}

impl TrafficSpec {
    pub fn new(kind: TrafficKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self) -> Result<(), LoadgenError> {
        let bad = |m: &str| Err(LoadgenError::InvalidSpec(m.to_string()));
        // NaN fails both checks.
        let positive = |x: f64| x > 0.0;
        let increasing = |t: &[usize]| !t.is_empty() && t[0] > 0 && t.windows(2).all(|w| w[0] < w[1]);
        match &self.kind {
            TrafficKind::HotsetLadder { targets, rounds, concurrency } => {
                if !increasing(targets) {
                    return bad("targets must be positive and strictly increasing");
                }
                if *rounds == 0 || *concurrency == 0 {
                    return bad("rounds and concurrency must be positive");
                }
            }
            TrafficKind::UniqueLadder { targets, concurrency } => {
                if !increasing(targets) {
                    return bad("targets must be positive and strictly increasing");
                }
                if *concurrency == 0 {
                    return bad("concurrency must be positive");
                }
            }
            TrafficKind::Staircase { count } if *count == 0 => return bad("count must be positive"),
            TrafficKind::Staircase { .. } => {}
            TrafficKind::Poisson { rate_rps, duration_s, adapters } => {
                if !positive(*rate_rps) || !positive(*duration_s) || *adapters == 0 {
                    return bad("rate, duration and adapter count must be positive");
                }
            }
            TrafficKind::HotReload { warm, warm_rate_rps, duration_s, reload_at_s, new_gap_s, .. } => {
                if *warm == 0 || !positive(*warm_rate_rps) || !positive(*duration_s) {
                    return bad("warm set, warm rate and duration must be positive");
                }
                if !(0.0..*duration_s).contains(reload_at_s) || !(*new_gap_s == 0.0 || positive(*new_gap_s)) {
                    return bad("reload must fall inside the run");
                }
            }
        }
        Ok(())
    }
}

fn poisson_arrivals(rng: &mut ChaCha8Rng, rate_rps: f64, start_ms: f64, end_ms: f64) -> Vec<Millis> {
    let mut out = Vec::new();
    let mut t = start_ms;
    loop {
        let u: f64 = rng.random();
        t += -libm::log(1.0 - u) / rate_rps * 1000.0;
        if t >= end_ms {
            return out;
        }
        out.push(t as Millis);
    }
}

fn warm_name(i: usize) -> String {
    format!("warm-{i:04}")
}

fn new_name(i: usize) -> String {
    format!("new-{i:04}")
}

fn req(id: usize, name: String, at: Millis, cohort: &str) -> Request {
    Request::new(id as u64, Target::Policy(name), at).cohort(cohort)
}

/// Arrival schedule for a spec. Ladder requests carry cohort `target-N`.
pub fn gen_trace(spec: &TrafficSpec) -> Result<Vec<Request>, LoadgenError> {
    spec.validate()?;
    // Arrival times and name choices use separate streams so that one does
    // not shift when the other's parameters change.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut arrivals = ChaCha8Rng::seed_from_u64(spec.seed);
    arrivals.set_stream(2);
    let mut out = Vec::new();
    match &spec.kind {
        TrafficKind::HotsetLadder { targets, rounds, .. } => {
            for &n in targets {
                let cohort = format!("target-{n}");
                let mut names: Vec<usize> = (0..n).collect();
                for _ in 0..*rounds {
                    names.shuffle(&mut rng);
                    for &i in &names {
                        out.push(req(out.len(), format!("hot-{i:05}"), 0, &cohort));
                    }
                }
            }
        }
        TrafficKind::UniqueLadder { targets, .. } => {
            for &n in targets {
                let cohort = format!("target-{n}");
                for i in 0..n {
                    out.push(req(out.len(), format!("uniq-{n}-{i:05}"), 0, &cohort));
                }
            }
        }
        TrafficKind::Staircase { count } => {
            for i in 0..*count {
                out.push(req(i, format!("cold-{i:04}"), 0, "cold"));
            }
        }
        TrafficKind::Poisson { rate_rps, duration_s, adapters } => {
            for at in poisson_arrivals(&mut arrivals, *rate_rps, 0.0, duration_s * 1000.0) {
                let a = rng.random_range(0..*adapters);
                out.push(req(out.len(), warm_name(a), at, "warm"));
            }
        }
        TrafficKind::HotReload { warm, new, warm_rate_rps, duration_s, reload_at_s, new_requests, new_gap_s, .. } => {
            let mut all: Vec<(Millis, String, &str)> = Vec::new();
            for at in poisson_arrivals(&mut arrivals, *warm_rate_rps, 0.0, duration_s * 1000.0) {
                all.push((at, warm_name(rng.random_range(0..*warm)), "warm"));
            }
            for k in 0..*new_requests {
                let at = secs(reload_at_s + k as f64 * new_gap_s);
                for i in 0..*new {
                    all.push((at, new_name(i), "new"));
                }
            }
            all.sort_by_key(|(at, _, _)| *at);
            for (i, (at, name, cohort)) in all.into_iter().enumerate() {
                out.push(req(i, name, at, cohort));
            }
        }
    }
    Ok(out)
}

fn revisions_for(names: impl IntoIterator<Item = String>, warm: bool, at: Millis) -> Vec<RevisionSpec> {
    names
        .into_iter()
        .map(|n| {
            let mut r = RevisionSpec::new(format!("rev/{n}"), n).registered_at(at);
            r.warm = warm;
            r
        })
        .collect()
}

/// Builds the full serving scenario: revisions, prewarm and the config
/// changes each traffic kind implies. Ladder kinds produce one scenario per
/// target; see [`ladder_scenarios`].
pub fn build_scenario(spec: &TrafficSpec, base: &ServeConfig) -> Result<Scenario, LoadgenError> {
    let requests = gen_trace(spec)?;
    let mut config = base.clone();
    let mut scenario = Scenario::default();
    match &spec.kind {
        TrafficKind::HotsetLadder { .. } | TrafficKind::UniqueLadder { .. } => {
            return Err(LoadgenError::InvalidSpec("ladder specs run one scenario per target".into()));
        }
        TrafficKind::Staircase { count } => {
            scenario.revisions = revisions_for((0..*count).map(|i| format!("cold-{i:04}")), false, 0);
        }
        TrafficKind::Poisson { adapters, .. } => {
            scenario.revisions = revisions_for((0..*adapters).map(warm_name), true, 0);
        }
        TrafficKind::HotReload { warm, new, reload_at_s, mode, .. } => {
            let reload = secs(*reload_at_s);
            scenario.revisions = revisions_for((0..*warm).map(warm_name), true, 0);
            scenario.revisions.extend(revisions_for((0..*new).map(new_name), false, reload));
            match mode {
                RolloutMode::Immediate => {
                    config.admission = AdmissionPolicy::Unlimited;
                    config.gating = false;
                }
                RolloutMode::Admitted => {
                    config.admission = AdmissionPolicy::Fixed { cap: 1 };
                    config.gating = false;
                }
                RolloutMode::TwoPhase => {
                    config.admission = AdmissionPolicy::Fixed { cap: 1 };
                    config.gating = true;
                    config.retry.get_or_insert(RetryPolicy { backoff_ms: 1_000, max_attempts: 1_000 });
                    scenario.prewarm_at_ms = Some(reload);
                    scenario.prewarm = (0..*new).map(|i| format!("rev/{}", new_name(i))).collect();
                }
            }
        }
    }
    scenario.config = config;
    scenario.requests = requests;
    Ok(scenario)
}

/// One scenario per ladder target, with closed-loop clients and retries.
pub fn ladder_scenarios(spec: &TrafficSpec, base: &ServeConfig) -> Result<Vec<(usize, Scenario)>, LoadgenError> {
    let (targets, concurrency) = match &spec.kind {
        TrafficKind::HotsetLadder { targets, concurrency, .. } | TrafficKind::UniqueLadder { targets, concurrency } => {
            (targets.clone(), *concurrency)
        }
        _ => return Err(LoadgenError::InvalidSpec("not a ladder spec".into())),
    };
    let requests = gen_trace(spec)?;
    let mut out = Vec::new();
    for n in targets {
        let cohort = format!("target-{n}");
        let reqs: Vec<Request> = requests.iter().filter(|r| r.cohort == cohort).cloned().collect();
        let mut names: Vec<String> = reqs.iter().map(|r| r.target.name().to_string()).collect();
        names.sort();
        names.dedup();
        let mut config = base.clone();
        config.client = ClientModel::ClosedLoop { concurrency };
        config.retry.get_or_insert(RetryPolicy { backoff_ms: base.reject_backoff_ms.max(1), max_attempts: 1_000 });
        out.push((n, Scenario { config, revisions: revisions_for(names, false, 0), requests: reqs, ..Default::default() }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub target: usize,
    pub loaded_count: usize,
    pub metrics: MetricsReport,
}

pub fn run_ladder(spec: &TrafficSpec, base: &ServeConfig) -> Result<Vec<LadderPoint>, LoadgenError> {
    ladder_scenarios(spec, base)?
        .into_iter()
        .map(|(target, sc)| {
            let out = run_scenario(&sc)?;
            let metrics = compute_metrics(&out.traces, &MetricsOptions::from_config(&sc.config)).with_sim(&out);
            Ok(LadderPoint { target, loaded_count: out.loaded_count(), metrics })
        })
        .collect()
}

/// Nearest-rank percentile of ascending-sorted values: the value at rank
/// ceil(p/100 * n).
pub fn nearest_rank(sorted: &[Millis], p: u32) -> Millis {
    if sorted.is_empty() {
        return 0;
    }
    let n = sorted.len() as u64;
    let rank = (p as u64 * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: Millis,
    pub p95: Millis,
    pub p99: Millis,
}

impl Percentiles {
    pub fn of(mut values: Vec<Millis>) -> Self {
        values.sort_unstable();
        Self { p50: nearest_rank(&values, 50), p95: nearest_rank(&values, 95), p99: nearest_rank(&values, 99) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub slo_ms: Millis,
    pub stall_ms: Millis,
    /// Window used for achieved rps; 0 means first to last arrival.
    pub window_ms: Millis,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { slo_ms: 5_000, stall_ms: 20_000, window_ms: 0 }
    }
}

impl MetricsOptions {
    pub fn from_config(cfg: &ServeConfig) -> Self {
        Self { slo_ms: cfg.slo_ms, stall_ms: cfg.stall_ms, window_ms: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub submitted: usize,
    pub completed: usize,
    pub rejects: usize,
    pub ttft: Percentiles,
    pub e2e: Percentiles,
    pub load: Percentiles,
    /// Completed within the SLO, over all submitted requests.
    pub slo_attainment: f64,
    pub achieved_rps: f64,
    pub stalls_over_threshold: usize,
    pub per_path: BTreeMap<String, usize>,
    /// Path-specific load percentiles, e.g. the ready path.
    pub load_by_path: BTreeMap<String, Percentiles>,
    pub loaded_count: usize,
    pub max_batch_distinct: usize,
}

impl MetricsReport {
    pub fn with_sim(mut self, out: &SimOutput) -> Self {
        self.loaded_count = out.loaded_count();
        self.max_batch_distinct = out.stats.max_batch_distinct;
        self
    }

    pub fn path_count(&self, path: TracePath) -> usize {
        self.per_path.get(path.as_str()).copied().unwrap_or(0)
    }
}

pub fn compute_metrics(traces: &[RequestTrace], opts: &MetricsOptions) -> MetricsReport {
    let done: Vec<&RequestTrace> = traces.iter().filter(|t| t.path != TracePath::Rejected).collect();
    let mut per_path = BTreeMap::new();
    let mut load_by_path_raw: BTreeMap<String, Vec<Millis>> = BTreeMap::new();
    for t in traces {
        *per_path.entry(t.path.as_str().to_string()).or_insert(0) += 1;
        if t.path != TracePath::Rejected {
            load_by_path_raw.entry(t.path.as_str().to_string()).or_default().push(t.load_ms);
        }
    }
    let within = done.iter().filter(|t| t.ttft_ms <= opts.slo_ms).count();
    let window = if opts.window_ms > 0 {
        opts.window_ms
    } else {
        let first = traces.iter().map(|t| t.arrival_ms).min().unwrap_or(0);
        let last = traces.iter().map(|t| t.arrival_ms).max().unwrap_or(0);
        (last - first).max(1)
    };
    MetricsReport {
        submitted: traces.len(),
        completed: done.len(),
        rejects: traces.len() - done.len(),
        ttft: Percentiles::of(done.iter().map(|t| t.ttft_ms).collect()),
        e2e: Percentiles::of(done.iter().map(|t| t.e2e_ms).collect()),
        load: Percentiles::of(done.iter().map(|t| t.load_ms).collect()),
        slo_attainment: if traces.is_empty() { 1.0 } else { within as f64 / traces.len() as f64 },
        achieved_rps: done.len() as f64 / (window as f64 / 1000.0),
        stalls_over_threshold: done.iter().filter(|t| t.ttft_ms > opts.stall_ms).count(),
        per_path,
        load_by_path: load_by_path_raw.into_iter().map(|(k, v)| (k, Percentiles::of(v))).collect(),
        loaded_count: 0,
        max_batch_distinct: 0,
    }
}

/// Metrics restricted to one cohort label.
pub fn cohort_metrics(traces: &[RequestTrace], cohort: &str, opts: &MetricsOptions) -> MetricsReport {
    let subset: Vec<RequestTrace> = traces.iter().filter(|t| t.cohort == cohort).cloned().collect();
    compute_metrics(&subset, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetInputs {
    pub active_wave: u64,
    pub gpu_slots: u64,
    pub gpus_per_engine: u64,
    pub headroom: Vec<f64>,
    pub slo_s: f64,
    pub warm_rps_per_engine: f64,
    pub cold_loads_per_s: f64,
    pub cold_loads_per_engine_s: f64,
    pub cold_cap_per_engine: u64,
}

impl Default for FleetInputs {
    fn default() -> Self {
        Self {
            active_wave: 2300,
            gpu_slots: 64,
            gpus_per_engine: 4,
            headroom: alloc::vec![1.2, 1.33, 1.5],
            slo_s: 60.0,
            warm_rps_per_engine: 2.57,
            cold_loads_per_s: 38.3,
            cold_loads_per_engine_s: 0.7,
            cold_cap_per_engine: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetRow {
    pub axis: String,
    pub rule: String,
    pub engines: u64,
    pub gpus: u64,
}

fn ceil_u(x: f64) -> u64 {
    // Guard against 36 * 1.5 landing a hair above an integer.
    let r = libm::round(x);
    if libm::fabs(x - r) < 1e-9 {
        r as u64
    } else {
        libm::ceil(x) as u64
    }
}

pub fn fleet_size(inputs: &FleetInputs) -> Vec<FleetRow> {
    let g = inputs.gpus_per_engine;
    let row = |axis: &str, rule: String, engines: u64| FleetRow { axis: axis.into(), rule, engines, gpus: engines * g };
    let placement = inputs.active_wave.div_ceil(inputs.gpu_slots.max(1));
    let mut rows = alloc::vec![row("warm_distinct", format!("ceil({}/{})", inputs.active_wave, inputs.gpu_slots), placement)];
    for f in &inputs.headroom {
        rows.push(row("warm_headroom", format!("{placement}x{f}"), ceil_u(placement as f64 * f)));
    }
    let demand = inputs.active_wave as f64 / inputs.slo_s;
    rows.push(row(
        "warm_throughput",
        format!("{}s SLO; {} req/s/engine", inputs.slo_s, inputs.warm_rps_per_engine),
        ceil_u(demand / inputs.warm_rps_per_engine),
    ));
    rows.push(row(
        "cold_rate",
        format!("{} cold/s; {}/engine", inputs.cold_loads_per_s, inputs.cold_loads_per_engine_s),
        ceil_u(inputs.cold_loads_per_s / inputs.cold_loads_per_engine_s),
    ));
    rows.push(row(
        "cold_burst",
        format!("{} cold uniques; <= {}/engine", inputs.active_wave, inputs.cold_cap_per_engine),
        inputs.active_wave.div_ceil(inputs.cold_cap_per_engine.max(1)),
    ));
    rows
}
