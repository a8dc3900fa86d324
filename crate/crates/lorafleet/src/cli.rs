//! The `lorafleet` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error (stderr carries
//! `error[<code>]: <message>`), 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lorafleet_core::loadgen::{
    build_scenario, cohort_metrics, compute_metrics, fleet_size, run_ladder, FleetInputs, MetricsOptions, TrafficKind,
    TrafficSpec,
};
use lorafleet_core::packfmt::{audit_packed, pack, unpack, LayoutParams, PackedFile, SyntheticAdapter};
use lorafleet_core::servesim::{run_scenario, traces_to_csv, RequestTrace, ServeConfig, TracePath};
use lorafleet_core::trainersim::{reference_plans, simulate_schedule, PhasePlan, Resources, ScheduleMode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::catalog::{audit_catalog, build_catalog, CatalogLayout, CatalogTemplate};
use crate::controlplane::{http, ControlConfig, ControlPlane, OpKind, Role, WorkerDescriptor};
use crate::fanout::{measure_load_slices, read_fanout, real_file_fetch_overrides, write_fanout};
use crate::lifecycle::PolicyService;
use crate::metastore::{Metastore, SystemClock};

pub const ROOT_ENV: &str = "LORAFLEET_ROOT";

#[derive(Debug, Parser)]
#[command(name = "lorafleet", version, about = "Adapter lifecycle tooling: packing, catalogs, control plane and probes")]
pub struct Cli {
    /// Seed for every seeded choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Data root. Defaults to $LORAFLEET_ROOT, then ./.lorafleet.
    #[arg(long, global = true, env = ROOT_ENV)]
    pub root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack a per-tensor directory into one packed file.
    Pack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a packed file into a per-tensor directory.
    Unpack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a sample of keys in one packed file.
    AuditFile {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Write a synthetic per-tensor adapter directory.
    Fixture(FixtureArgs),
    /// Compare load slices of the per-tensor and packed forms.
    Measure {
        #[arg(long)]
        fanout: PathBuf,
        #[arg(long)]
        packed: PathBuf,
    },
    /// Build or audit a sharded adapter catalog
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Run the HTTP control plane over the store under the data root.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long, default_value_t = 100)]
        tick_ms: u64,
    },
    /// Call a running control plane.
    Client {
        #[arg(long, default_value = "http://127.0.0.1:7070")]
        url: String,
        #[command(subcommand)]
        call: ClientCmd,
    },
    /// Inspect or garbage-collect the metadata store
    #[command(subcommand)]
    Store(StoreCmd),
    /// Compare sequential and concurrent training schedules
    #[command(subcommand)]
    Trainsim(TrainsimCmd),
    /// Replay a traffic scenario against the serving model
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Engine and GPU counts for an active adapter wave.
    FleetSize,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: u32,
    #[arg(long, default_value_t = 4)]
    pub experts: u32,
    #[arg(long, default_value_t = 2)]
    pub projections: u32,
    #[arg(long, default_value_t = 5)]
    pub others: u32,
    #[arg(long)]
    pub shared_expert: bool,
}

#[derive(Debug, Subcommand)]
pub enum CatalogCmd {
    /// Build a sharded catalog of packed adapters.
    Build {
        #[arg(long)]
        shards: u32,
        #[arg(long)]
        per_shard: u32,
        /// Catalog directory. Defaults to <data root>/catalog.
        #[arg(long = "catalog-root")]
        catalog_root: Option<PathBuf>,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        parallelism: usize,
        /// Also commit each adapter as a revision in the data-root store.
        #[arg(long)]
        register: bool,
    },
    /// Audit a stratified sample of a catalog.
    Audit {
        #[arg(long = "catalog-root")]
        catalog_root: Option<PathBuf>,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        keys: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClientCmd {
    Submit {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "{}")]
        payload: String,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    Poll {
        op_id: String,
    },
    RegisterWorker {
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long)]
        base: String,
        #[arg(long)]
        max_rank: u32,
        #[arg(long, value_delimiter = ',')]
        modules: Vec<String>,
        #[arg(long, default_value_t = 1)]
        capacity: u32,
        #[arg(long)]
        id: Option<String>,
    },
    EvictWorker {
        worker_id: String,
    },
    Policy {
        policy_id: String,
    },
    Metrics,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RoleArg {
    Trainer,
    Sampler,
}

#[derive(Debug, Subcommand)]
pub enum StoreCmd {
    /// Replay the log and report entries, torn tail and orphan attempts.
    Inspect,
    /// Remove orphan attempts older than the threshold.
    Gc {
        #[arg(long, default_value_t = crate::metastore::DEFAULT_GC_AGE_MS)]
        older_than_ms: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrainsimCmd {
    /// Simulate phase plans sequentially and concurrently.
    Run {
        /// `4b`, `30b`, or a JSON file holding a list of phase plans.
        #[arg(long, default_value = "4b")]
        plans: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbeCmd {
    /// Run a traffic spec against a simulated serving actor.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Actor config (ServeConfig JSON). Falls back to --config.
        #[arg(long)]
        actor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace modeled fetch time with measured reads from this catalog.
        #[arg(long)]
        real_file: Option<PathBuf>,
    },
    /// Recompute metrics from a traces.csv directory.
    Report {
        #[arg(long)]
        traces: PathBuf,
    },
}

/// Domain failure with a stable code.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    fn new(code: &str, message: impl ToString) -> Self {
        Self { code: code.to_string(), message: message.to_string() }
    }
}

macro_rules! impl_from_coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e)
            }
        }
    )*};
}

impl_from_coded!(
    lorafleet_core::packfmt::PackError,
    lorafleet_core::loadgen::LoadgenError,
    lorafleet_core::servesim::ServeError,
    crate::fanout::FanoutError,
    crate::catalog::CatalogError,
    crate::metastore::StoreError,
    crate::controlplane::ControlError
);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io_error", e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::new("io_error", format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::new("invalid_config", format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::new("io_error", format!("{}: {e}", path.display())))
}

struct Ctx {
    seed: Option<u64>,
    config: Option<PathBuf>,
    root: PathBuf,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn config_or_default<T: DeserializeOwned + Default>(&self) -> CliResult<T> {
        self.config.as_deref().map(read_json).unwrap_or_else(|| Ok(T::default()))
    }

    fn open_store(&self) -> CliResult<Arc<Metastore>> {
        Ok(Arc::new(Metastore::open(self.root.join("store"), Arc::new(SystemClock))?))
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        config: cli.config,
        root: cli.root.unwrap_or_else(|| PathBuf::from(".lorafleet")),
    };
    match dispatch(&ctx, cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            1
        }
    }
}

fn dispatch(ctx: &Ctx, cmd: Command) -> CliResult {
    match cmd {
        Command::Pack { input, out } => {
            let (manifest, payloads) = read_fanout(&input)?;
            let file = pack(&manifest, &payloads)?;
            write_file(&out, file.as_bytes())?;
            emit(&json!({
                "out": out,
                "tensors_in": manifest.tensors.len(),
                "keys_out": file.key_count(),
                "groups": file.index.groups.len(),
                "copied": file.index.copied.len(),
                "bytes": file.len(),
            }));
        }
        Command::Unpack { input, out } => {
            let file = PackedFile::parse(fs::read(&input)?)?;
            let (manifest, payloads) = unpack(&file)?;
            write_fanout(&out, &manifest, &payloads)?;
            emit(&json!({ "out": out, "tensors": manifest.tensors.len(), "total_bytes": manifest.total_bytes }));
        }
        Command::AuditFile { file, samples } => {
            let started = std::time::Instant::now();
            let parsed = PackedFile::parse(fs::read(&file)?)?;
            let mut report = audit_packed(&parsed, samples, ctx.seed());
            report.elapsed_us = started.elapsed().as_micros() as u64;
            emit(&report);
            if !report.is_clean() {
                return Err(CliError::new("audit_failed", format!("{} of {} sampled keys failed", report.errors.len(), report.sampled)));
            }
        }
        Command::Fixture(a) => {
            let mut gen = SyntheticAdapter::tiny(LayoutParams::new(a.layers, a.experts, a.projections, a.others));
            gen.shared_expert = a.shared_expert;
            let (manifest, payloads) = gen.build(ctx.seed());
            write_fanout(&a.out, &manifest, &payloads)?;
            emit(&json!({ "out": a.out, "tensors": manifest.tensors.len(), "packed_keys": gen.layout.packed_key_count() }));
        }
        Command::Measure { fanout, packed } => emit(&measure_load_slices(&fanout, &packed)?),
        Command::Catalog(c) => catalog(ctx, c)?,
        Command::Serve { listen, tick_ms } => serve(ctx, &listen, tick_ms)?,
        Command::Client { url, call } => client(&url, call)?,
        Command::Store(StoreCmd::Inspect) => {
            let (_, report) = Metastore::recover(ctx.root.join("store"), Arc::new(SystemClock))?;
            emit(&report);
        }
        Command::Store(StoreCmd::Gc { older_than_ms }) => emit(&ctx.open_store()?.gc_orphans(older_than_ms)?),
        Command::Trainsim(TrainsimCmd::Run { plans, out }) => trainsim(ctx, &plans, &out)?,
        Command::Probe(ProbeCmd::Run { spec, actor, out, real_file }) => {
            probe_run(ctx, &spec, actor.as_deref(), &out, real_file.as_deref())?
        }
        Command::Probe(ProbeCmd::Report { traces }) => probe_report(ctx, &traces)?,
        Command::FleetSize => {
            let inputs: FleetInputs = ctx.config_or_default()?;
            emit(&json!({ "inputs": inputs, "rows": fleet_size(&inputs) }));
        }
    }
    Ok(())
}

fn catalog(ctx: &Ctx, cmd: CatalogCmd) -> CliResult {
    match cmd {
        CatalogCmd::Build { shards, per_shard, catalog_root, template, parallelism, register } => {
            let root = catalog_root.unwrap_or_else(|| ctx.root.join("catalog"));
            let template: CatalogTemplate = match template {
                Some(p) => read_json(&p)?,
                None => CatalogTemplate::default(),
            };
            let policies = if register { Some(PolicyService::open(ctx.open_store()?, ctx.seed())) } else { None };
            let report = build_catalog(&CatalogLayout::new(root, shards, per_shard), &template, parallelism, ctx.seed(), policies.as_ref())?;
            emit(&report);
            if report.error_count > 0 {
                return Err(CliError::new("build_errors", format!("{} adapters failed", report.error_count)));
            }
        }
        CatalogCmd::Audit { catalog_root, samples, keys } => {
            let root = catalog_root.unwrap_or_else(|| ctx.root.join("catalog"));
            let report = audit_catalog(&root, samples, ctx.seed(), keys)?;
            emit(&report);
            if !report.errors.is_empty() {
                return Err(CliError::new("audit_failed", format!("{} of {} samples failed", report.errors.len(), report.samples)));
            }
        }
    }
    Ok(())
}

fn serve(ctx: &Ctx, listen: &str, tick_ms: u64) -> CliResult {
    let mut config: ControlConfig = ctx.config_or_default()?;
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    let cp = Arc::new(ControlPlane::open(ctx.open_store()?, config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        eprintln!("control plane listening on {}", listener.local_addr()?);
        let ticker = tokio::spawn(http::scheduler_loop(cp.clone(), Duration::from_millis(tick_ms.max(1))));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let served = axum::serve(listener, http::router(cp)).with_graceful_shutdown(shutdown).await;
        ticker.abort();
        served.map_err(CliError::from)
    })
}

fn client(url: &str, call: ClientCmd) -> CliResult {
    let http = reqwest::blocking::Client::new();
    let base = url.trim_end_matches('/');
    let request = match call {
        ClientCmd::Submit { kind, payload, idempotency_key } => {
            let kind: OpKind = serde_json::from_value(Value::String(kind.clone()))
                .map_err(|_| CliError::new("schema_invalid", format!("unknown op kind `{kind}`")))?;
            let payload: Value =
                serde_json::from_str(&payload).map_err(|e| CliError::new("schema_invalid", format!("payload: {e}")))?;
            http.post(format!("{base}/v1/ops"))
                .json(&json!({ "kind": kind, "payload": payload, "idempotency_key": idempotency_key }))
        }
        ClientCmd::Poll { op_id } => http.get(format!("{base}/v1/ops/{op_id}")),
        ClientCmd::RegisterWorker { role, base: base_id, max_rank, modules, capacity, id } => {
            let desc = WorkerDescriptor {
                worker_id: id,
                role: match role {
                    RoleArg::Trainer => Role::Trainer,
                    RoleArg::Sampler => Role::Sampler,
                },
                base_id,
                max_rank,
                supported_modules: modules,
                capacity,
            };
            http.post(format!("{base}/v1/workers")).json(&desc)
        }
        ClientCmd::EvictWorker { worker_id } => http.delete(format!("{base}/v1/workers/{worker_id}")),
        ClientCmd::Policy { policy_id } => http.get(format!("{base}/v1/policies/{policy_id}")),
        ClientCmd::Metrics => http.get(format!("{base}/v1/metrics")),
    };
    let response = request.send().map_err(|e| CliError::new("unreachable", e))?;
    let ok = response.status().is_success();
    let body: Value = response.json().map_err(|e| CliError::new("bad_response", e))?;
    if ok {
        emit(&body);
        Ok(())
    } else {
        let code = body.get("code").and_then(Value::as_str).unwrap_or("http_error");
        let message = body.get("message").and_then(Value::as_str).unwrap_or("request failed");
        Err(CliError::new(code, message))
    }
}

fn trainsim(ctx: &Ctx, plans: &str, out: &Path) -> CliResult {
    let plans: Vec<PhasePlan> = match reference_plans(plans) {
        Some(p) => p,
        None => read_json(Path::new(plans))?,
    };
    let resources: Resources = ctx.config_or_default()?;
    let seq = simulate_schedule(&plans, ScheduleMode::Sequential, &resources);
    let con = simulate_schedule(&plans, ScheduleMode::Concurrent, &resources);
    fs::create_dir_all(out)?;
    write_file(&out.join("sequential.csv"), seq.to_csv().as_bytes())?;
    write_file(&out.join("concurrent.csv"), con.to_csv().as_bytes())?;
    let summary = json!({
        "policies": plans.len(),
        "sequential_ms": seq.wall_time_ms,
        "concurrent_ms": con.wall_time_ms,
        "speedup": seq.wall_time_ms as f64 / con.wall_time_ms.max(1) as f64,
        "peak_resident_bytes": { "sequential": seq.peak_resident_bytes, "concurrent": con.peak_resident_bytes },
    });
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
    emit(&summary);
    Ok(())
}

fn probe_run(ctx: &Ctx, spec_path: &Path, actor: Option<&Path>, out: &Path, real_file: Option<&Path>) -> CliResult {
    let mut spec: TrafficSpec = read_json(spec_path)?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let mut config: ServeConfig = match actor.or(ctx.config.as_deref()) {
        Some(p) => read_json(p)?,
        None => ServeConfig::default(),
    };
    fs::create_dir_all(out)?;
    if matches!(spec.kind, TrafficKind::HotsetLadder { .. } | TrafficKind::UniqueLadder { .. }) {
        let points = run_ladder(&spec, &config)?;
        write_file(&out.join("ladder.json"), serde_json::to_string_pretty(&points).expect("json").as_bytes())?;
        let summary: Vec<Value> = points.iter().map(|p| json!({ "target": p.target, "loaded_count": p.loaded_count })).collect();
        emit(&summary);
        return Ok(());
    }
    let mut scenario = build_scenario(&spec, &config)?;
    if let Some(catalog) = real_file {
        let names: Vec<&str> = scenario.revisions.iter().map(|r| r.revision_id.as_str()).collect();
        config.fetch_override_ms = real_file_fetch_overrides(catalog, names)?;
        scenario.config.fetch_override_ms = config.fetch_override_ms.clone();
    }
    let sim = run_scenario(&scenario)?;
    let opts = MetricsOptions::from_config(&scenario.config);
    let overall = compute_metrics(&sim.traces, &opts).with_sim(&sim);
    let mut cohorts = BTreeMap::new();
    for cohort in sim.traces.iter().map(|t| t.cohort.as_str()).filter(|c| !c.is_empty()).collect::<std::collections::BTreeSet<_>>() {
        cohorts.insert(cohort.to_string(), cohort_metrics(&sim.traces, cohort, &opts));
    }
    write_file(&out.join("traces.csv"), traces_to_csv(&sim.traces).as_bytes())?;
    let metrics = json!({
        "p50": overall.ttft.p50,
        "p95": overall.ttft.p95,
        "p99": overall.ttft.p99,
        "slo_attainment": overall.slo_attainment,
        "loaded_count": overall.loaded_count,
        "max_batch_distinct": overall.max_batch_distinct,
        "rejects": overall.rejects,
        "report": overall,
        "cohorts": cohorts,
        "prewarm": sim.prewarm,
        "real_file": real_file.is_some(),
    });
    write_file(&out.join("metrics.json"), serde_json::to_string_pretty(&metrics).expect("json").as_bytes())?;
    emit(&metrics);
    Ok(())
}

#[derive(serde::Deserialize)]
struct TraceRow {
    request_id: u64,
    policy: String,
    arrival_ms: u64,
    path: String,
    ttft_ms: u64,
    e2e_ms: u64,
    load_ms: u64,
}

fn parse_path(s: &str) -> Option<TracePath> {
    [TracePath::GpuHit, TracePath::CpuPromote, TracePath::ColdLoad, TracePath::ReadyPath, TracePath::Rejected]
        .into_iter()
        .find(|p| p.as_str() == s)
}

fn probe_report(ctx: &Ctx, dir: &Path) -> CliResult {
    let path = if dir.is_dir() { dir.join("traces.csv") } else { dir.to_path_buf() };
    let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::new("io_error", e))?;
    let mut traces = Vec::new();
    for row in reader.deserialize::<TraceRow>() {
        let r = row.map_err(|e| CliError::new("bad_traces", e))?;
        let p = parse_path(&r.path).ok_or_else(|| CliError::new("bad_traces", format!("unknown path `{}`", r.path)))?;
        traces.push(RequestTrace {
            request_id: r.request_id,
            origin_id: r.request_id,
            attempt: 0,
            policy: r.policy,
            revision_id: None,
            cohort: String::new(),
            arrival_ms: r.arrival_ms,
            path: p,
            ttft_ms: r.ttft_ms,
            e2e_ms: r.e2e_ms,
            load_ms: r.load_ms,
            reject_code: None,
        });
    }
    let cfg: ServeConfig = ctx.config_or_default()?;
    let m = compute_metrics(&traces, &MetricsOptions::from_config(&cfg));
    emit(&json!({
        "p50": m.ttft.p50,
        "p95": m.ttft.p95,
        "p99": m.ttft.p99,
        "slo_attainment": m.slo_attainment,
        "rejects": m.rejects,
        "report": m,
    }));
    Ok(())
}
