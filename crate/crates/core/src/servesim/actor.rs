use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    AdmissionControl, ClientModel, ColdLoader, CpuCache, LoadJob, Request, RequestId, RequestTrace, RevisionSpec,
    RoundObservation, ServeConfig, ServeError, Target, TracePath,
};
use crate::lifecycle::{check_compatibility, ActivationProof, ActorDescriptor, ReadinessEntry, ReadinessState};
use crate::Millis;

const MAX_PREWARM_ATTEMPTS: u32 = 64;

/// Routing decision for one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    GpuHit(String),
    CpuPromote(String),
    /// First user touch of a revision that became ready through prewarm.
    ReadyPath(String),
    ColdLoad(String),
}

impl Route {
    pub fn revision(&self) -> &str {
        match self {
            Route::GpuHit(r) | Route::CpuPromote(r) | Route::ReadyPath(r) | Route::ColdLoad(r) => r,
        }
    }

    fn path(&self) -> TracePath {
        match self {
            Route::GpuHit(_) => TracePath::GpuHit,
            Route::CpuPromote(_) => TracePath::CpuPromote,
            Route::ReadyPath(_) => TracePath::ReadyPath,
            Route::ColdLoad(_) => TracePath::ColdLoad,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub requests: usize,
    pub distinct_adapters: usize,
    pub joiners: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrewarmReport {
    pub start_ms: Millis,
    pub span_ms: Millis,
    /// Activation time per requested revision; `None` if it never became ready.
    pub activated_ms: BTreeMap<String, Option<Millis>>,
    pub retries: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub activations: usize,
    pub loads_completed: usize,
    pub loads_rejected: usize,
    pub peak_loading: usize,
    pub peak_queued: usize,
    pub decode_steps: usize,
    pub max_batch_distinct: usize,
    pub engine_lock_ms: Millis,
    /// Per activation: time between admission to the loading set and taking the engine lock.
    pub lock_wait_ms: Vec<Millis>,
    pub evictions: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutput {
    pub traces: Vec<RequestTrace>,
    pub batches: Vec<BatchRecord>,
    pub load_jobs: Vec<LoadJob>,
    pub prewarm: Option<PrewarmReport>,
    pub stats: EngineStats,
    pub cpu_resident: Vec<String>,
    pub readiness: Vec<ReadinessEntry>,
    pub end_ms: Millis,
}

impl SimOutput {
    /// Distinct revisions resident in the CPU cache when the run ended.
    pub fn loaded_count(&self) -> usize {
        self.cpu_resident.len()
    }
}

struct RevState {
    spec: RevisionSpec,
    bytes: u64,
    readiness: ReadinessEntry,
    user_touched: bool,
}

enum Event {
    Arrival { req: Request, origin: RequestId, attempt: u32 },
    Prewarm(Vec<String>),
    PrewarmRetry { revision: String, attempt: u32 },
}

struct InFlight {
    req: Request,
    origin: RequestId,
    attempt: u32,
    revision: String,
    path: TracePath,
    load_ms: Millis,
    runnable_since: Millis,
    first_token_ms: Option<Millis>,
    remaining: u32,
}

enum Activity {
    Activate(usize),
    Decode(Vec<RequestId>),
}

/// Deterministic single-actor serving simulation.
pub struct ServingActor {
    cfg: ServeConfig,
    admission: Box<dyn AdmissionControl>,
    descriptor: Option<ActorDescriptor>,
    revisions: BTreeMap<String, RevState>,
    policies: BTreeMap<String, Vec<String>>,
    cache: CpuCache,
    loader: ColdLoader,
    now: Millis,
    events: BTreeMap<(Millis, u64), Event>,
    event_seq: u64,
    next_id: RequestId,
    inflight: BTreeMap<RequestId, InFlight>,
    runnable: VecDeque<RequestId>,
    running: Vec<RequestId>,
    gpu_resident: BTreeMap<String, usize>,
    activity: Option<(Millis, Activity)>,
    round_cap: Option<usize>,
    round_activations: usize,
    closed_backlog: VecDeque<Request>,
    traces: Vec<RequestTrace>,
    batches: Vec<BatchRecord>,
    prewarm: Option<PrewarmReport>,
    stats: EngineStats,
}

impl ServingActor {
    pub fn new(cfg: ServeConfig, revisions: &[RevisionSpec]) -> Result<Self, ServeError> {
        cfg.validate()?;
        let mut actor = Self {
            admission: cfg.admission.build(),
            cache: CpuCache::new(cfg.cpu_entries, cfg.cpu_bytes),
            loader: ColdLoader::new(cfg.max_inflight, cfg.queue_depth),
            cfg,
            descriptor: None,
            revisions: BTreeMap::new(),
            policies: BTreeMap::new(),
            now: 0,
            events: BTreeMap::new(),
            event_seq: 0,
            next_id: 0,
            inflight: BTreeMap::new(),
            runnable: VecDeque::new(),
            running: Vec::new(),
            gpu_resident: BTreeMap::new(),
            activity: None,
            round_cap: None,
            round_activations: 0,
            closed_backlog: VecDeque::new(),
            traces: Vec::new(),
            batches: Vec::new(),
            prewarm: None,
            stats: EngineStats::default(),
        };
        let mut ordered: Vec<&RevisionSpec> = revisions.iter().collect();
        ordered.sort_by_key(|r| r.registered_at_ms);
        for spec in ordered {
            actor.register(spec.clone())?;
        }
        Ok(actor)
    }

    /// Checks revisions that carry a full record against this base deployment.
    pub fn with_descriptor(mut self, descriptor: ActorDescriptor) -> Self {
        self.descriptor = Some(descriptor);
        self
    }

    fn register(&mut self, spec: RevisionSpec) -> Result<(), ServeError> {
        let id = spec.revision_id.clone();
        if self.revisions.contains_key(&id) {
            return Err(ServeError::InvalidConfig(alloc::format!("duplicate revision {id}")));
        }
        let bytes = spec.bytes.unwrap_or(self.cfg.default_adapter_bytes);
        let mut readiness = ReadinessEntry::absent(self.cfg.actor_id.clone(), id.clone());
        let lc = |e: crate::lifecycle::LifecycleError| ServeError::InvalidConfig(e.to_string());
        readiness.transition(ReadinessState::Registered, spec.registered_at_ms, None).map_err(lc)?;
        if spec.warm {
            self.cache.seed(&id, bytes)?;
            let proof = ActivationProof::issue(&self.cfg.actor_id, &id, 0);
            readiness.transition(ReadinessState::Prewarming, 0, None).map_err(lc)?;
            readiness.transition(ReadinessState::Ready, 0, Some(&proof)).map_err(lc)?;
            if self.cfg.gating {
                self.cache.pin(&id);
            }
        }
        self.policies.entry(spec.policy.clone()).or_default().push(id.clone());
        let warm = spec.warm;
        self.revisions.insert(id, RevState { spec, bytes, readiness, user_touched: warm });
        Ok(())
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn cache(&self) -> &CpuCache {
        &self.cache
    }

    pub fn loader(&self) -> &ColdLoader {
        &self.loader
    }

    pub fn readiness(&self, revision: &str) -> Option<ReadinessState> {
        self.revisions.get(revision).map(|r| r.readiness.state)
    }

    fn push_event(&mut self, at: Millis, ev: Event) {
        self.events.insert((at, self.event_seq), ev);
        self.event_seq += 1;
    }

    pub fn submit(&mut self, req: Request) {
        self.next_id = self.next_id.max(req.id + 1);
        let at = req.arrival_ms.max(self.now);
        let origin = req.id;
        self.push_event(at, Event::Arrival { req, origin, attempt: 0 });
    }

    pub fn submit_all(&mut self, reqs: impl IntoIterator<Item = Request>) -> Result<(), ServeError> {
        let reqs: Vec<Request> = reqs.into_iter().collect();
        let mut seen = BTreeSet::new();
        for r in &reqs {
            if !seen.insert(r.id) {
                return Err(ServeError::InvalidConfig(alloc::format!("duplicate request id {}", r.id)));
            }
            self.next_id = self.next_id.max(r.id + 1);
        }
        match self.cfg.client {
            ClientModel::OpenLoop => reqs.into_iter().for_each(|r| self.submit(r)),
            ClientModel::ClosedLoop { concurrency } => {
                let mut it = reqs.into_iter();
                for r in it.by_ref().take(concurrency) {
                    self.submit(r);
                }
                self.closed_backlog.extend(it);
            }
        }
        Ok(())
    }

    pub fn schedule_prewarm(&mut self, at: Millis, revisions: Vec<String>) -> Result<(), ServeError> {
        for r in &revisions {
            if !self.revisions.contains_key(r) {
                return Err(ServeError::UnknownRevision(r.clone()));
            }
        }
        self.push_event(at, Event::Prewarm(revisions));
        Ok(())
    }

    fn latest(&self, policy: &str, ready_only: bool) -> Result<&str, ServeError> {
        let ids = self.policies.get(policy).ok_or_else(|| ServeError::UnknownPolicy(policy.into()))?;
        let visible: Vec<&String> =
            ids.iter().filter(|id| self.revisions[id.as_str()].spec.registered_at_ms <= self.now).collect();
        let newest = *visible.last().ok_or_else(|| ServeError::UnknownPolicy(policy.into()))?;
        if !ready_only {
            return Ok(newest);
        }
        visible
            .iter()
            .rev()
            .find(|id| self.revisions[id.as_str()].readiness.state == ReadinessState::Ready)
            .map(|id| id.as_str())
            .ok_or_else(|| ServeError::NotReady(newest.clone()))
    }

    /// Routes a request against the current tiers without changing them.
    pub fn resolve(&self, target: &Target) -> Result<Route, ServeError> {
        let revision = match target {
            Target::Policy(p) => self.latest(p, self.cfg.gating)?,
            Target::Revision(r) => {
                let st = self.revisions.get(r).filter(|s| s.spec.registered_at_ms <= self.now);
                let st = st.ok_or_else(|| ServeError::UnknownRevision(r.clone()))?;
                if self.cfg.gating && st.readiness.state != ReadinessState::Ready {
                    return Err(ServeError::NotReady(r.clone()));
                }
                r.as_str()
            }
        };
        let st = &self.revisions[revision];
        if let (Some(d), Some(adapter)) = (&self.descriptor, &st.spec.adapter) {
            check_compatibility(adapter, d)
                .map_err(|reason| ServeError::IncompatibleRevision { revision: revision.into(), reason })?;
        }
        let rev = revision.to_string();
        Ok(if self.gpu_resident.contains_key(revision) {
            Route::GpuHit(rev)
        } else if self.cache.contains(revision) {
            if self.cfg.gating && !st.user_touched {
                Route::ReadyPath(rev)
            } else {
                Route::CpuPromote(rev)
            }
        } else {
            Route::ColdLoad(rev)
        })
    }

    /// Single-flight enqueue of a user cold load.
    pub fn enqueue_cold_load(&mut self, revision: &str, waiter: Option<RequestId>) -> Result<super::Enqueued, ServeError> {
        self.loader.enqueue(revision, waiter, false, self.now, self.cfg.reject_backoff_ms)
    }

    fn output_tokens(&self, req: &Request) -> u32 {
        req.output_tokens.unwrap_or(self.cfg.output_tokens).max(1)
    }

    fn arrive(&mut self, req: Request, origin: RequestId, attempt: u32) {
        let route = match self.resolve(&req.target) {
            Ok(r) => r,
            Err(e) => return self.reject(req, origin, attempt, None, e),
        };
        let revision = route.revision().to_string();
        if let Some(st) = self.revisions.get_mut(&revision) {
            st.user_touched = true;
        }
        let remaining = self.output_tokens(&req);
        let id = req.id;
        let mut inflight = InFlight {
            req,
            origin,
            attempt,
            revision: revision.clone(),
            path: route.path(),
            load_ms: 0,
            runnable_since: self.now,
            first_token_ms: None,
            remaining,
        };
        if let Route::ColdLoad(_) = route {
            match self.loader.enqueue(&revision, Some(id), false, self.now, self.cfg.reject_backoff_ms) {
                Ok(_) => {
                    self.inflight.insert(id, inflight);
                }
                Err(e) => self.reject(inflight.req, origin, attempt, Some(revision), e),
            }
        } else {
            self.cache.touch(&revision);
            self.cache.pin(&revision);
            inflight.runnable_since = self.now;
            self.inflight.insert(id, inflight);
            self.runnable.push_back(id);
        }
    }

    fn reject(&mut self, req: Request, origin: RequestId, attempt: u32, revision: Option<String>, err: ServeError) {
        self.traces.push(RequestTrace {
            request_id: req.id,
            origin_id: origin,
            attempt,
            policy: req.target.name().to_string(),
            revision_id: revision,
            cohort: req.cohort.clone(),
            arrival_ms: req.arrival_ms,
            path: TracePath::Rejected,
            ttft_ms: self.now - req.arrival_ms,
            e2e_ms: self.now - req.arrival_ms,
            load_ms: 0,
            reject_code: Some(err.code().to_string()),
        });
        match self.cfg.retry {
            Some(rp) if err.retryable() && attempt + 1 < rp.max_attempts => {
                let id = self.next_id;
                self.next_id += 1;
                let at = self.now + rp.backoff_ms.max(1);
                let retry = Request { id, arrival_ms: at, ..req };
                self.push_event(at, Event::Arrival { req: retry, origin, attempt: attempt + 1 });
            }
            _ => self.release_client(),
        }
    }

    fn release_client(&mut self) {
        if let Some(mut next) = self.closed_backlog.pop_front() {
            next.arrival_ms = next.arrival_ms.max(self.now);
            self.submit(next);
        }
    }

    fn start_prewarm(&mut self, revisions: Vec<String>) {
        let report = self.prewarm.get_or_insert_with(|| PrewarmReport { start_ms: self.now, ..Default::default() });
        for r in &revisions {
            report.activated_ms.entry(r.clone()).or_insert(None);
        }
        for r in revisions {
            let st = self.revisions.get_mut(&r).expect("validated at scheduling");
            if st.readiness.state == ReadinessState::Registered {
                st.readiness.transition(ReadinessState::Prewarming, self.now, None).expect("registered to prewarming");
            }
            if st.readiness.state == ReadinessState::Prewarming {
                self.prewarm_attempt(r, 0);
            }
        }
    }

    fn prewarm_attempt(&mut self, revision: String, attempt: u32) {
        if self.cache.contains(&revision) && self.loader.live_job(&revision).is_none() {
            // Already resident through a user load; activation is immediate.
            self.mark_ready(&revision);
            return;
        }
        if self.loader.enqueue(&revision, None, true, self.now, 0).is_err() {
            self.schedule_prewarm_retry(revision, attempt + 1);
        }
    }

    fn schedule_prewarm_retry(&mut self, revision: String, attempt: u32) {
        if attempt >= MAX_PREWARM_ATTEMPTS {
            return;
        }
        if let Some(p) = self.prewarm.as_mut() {
            p.retries += 1;
        }
        let delay = self
            .cfg
            .prewarm_backoff_ms
            .max(1)
            .saturating_mul(1 << (attempt - 1).min(30))
            .min(self.cfg.prewarm_backoff_cap_ms.max(1));
        self.push_event(self.now + delay, Event::PrewarmRetry { revision, attempt });
    }

    fn mark_ready(&mut self, revision: &str) {
        let proof = ActivationProof::issue(&self.cfg.actor_id, revision, self.now);
        let st = self.revisions.get_mut(revision).expect("known revision");
        if st.readiness.state != ReadinessState::Prewarming {
            return;
        }
        st.readiness.transition(ReadinessState::Ready, self.now, Some(&proof)).expect("prewarming to ready with proof");
        if self.cfg.gating {
            self.cache.pin(revision);
        }
        if let Some(p) = self.prewarm.as_mut() {
            if let Some(slot) = p.activated_ms.get_mut(revision) {
                *slot = Some(self.now);
                p.span_ms = p.span_ms.max(self.now - p.start_ms);
            }
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Arrival { req, origin, attempt } => self.arrive(req, origin, attempt),
            Event::Prewarm(revs) => self.start_prewarm(revs),
            Event::PrewarmRetry { revision, attempt } => self.prewarm_attempt(revision, attempt),
        }
    }

    fn slice_ms(&self, revision: &str) -> Millis {
        let l = &self.cfg.latency;
        let fetch = self.cfg.fetch_override_ms.get(revision).copied().unwrap_or(l.fetch_ms);
        fetch + l.build_ms + l.register_ms + l.activate_ms
    }

    fn has_decode_work(&self) -> bool {
        !self.running.is_empty() || !self.runnable.is_empty()
    }

    fn begin_round(&mut self) -> usize {
        let obs = RoundObservation {
            now: self.now,
            runnable: self.runnable.len(),
            pending_activations: self.loader.loading_count(),
            oldest_runnable_wait_ms: self
                .runnable
                .front()
                .map(|id| self.now - self.inflight[id].runnable_since)
                .unwrap_or(0),
        };
        let cap = self.admission.round_cap(&obs).max(1);
        self.round_cap = Some(cap);
        self.round_activations = 0;
        cap
    }

    fn start_activity(&mut self) {
        let cap = match self.round_cap {
            Some(c) => c,
            None => self.begin_round(),
        };
        let next = self.loader.next_activation();
        let job = match next {
            Some(j) if self.round_activations < cap => Some(j),
            Some(j) if !self.has_decode_work() => {
                self.begin_round();
                Some(j)
            }
            _ => None,
        };
        if let Some(j) = job {
            let (revision, admitted) = {
                let job = self.loader.job(j);
                (job.revision_id.clone(), job.start_ms.unwrap_or(self.now))
            };
            self.loader.mark_activating(j, self.now);
            let slice = self.slice_ms(&revision);
            self.round_activations += 1;
            self.stats.activations += 1;
            self.stats.engine_lock_ms += slice;
            self.stats.lock_wait_ms.push(self.now - admitted);
            self.activity = Some((self.now + slice, Activity::Activate(j)));
        } else if self.has_decode_work() {
            self.start_decode();
        }
    }

    /// Forms the next decode batch: running requests stay, queued requests
    /// join in FIFO order while the distinct-adapter window has room.
    pub fn execute_batch(&mut self) -> Vec<RequestId> {
        let mut distinct: BTreeSet<&str> = self.running.iter().map(|id| self.inflight[id].revision.as_str()).collect();
        let mut size = self.running.len();
        let mut joiners = Vec::new();
        let mut waiting = VecDeque::with_capacity(self.runnable.len());
        for &id in &self.runnable {
            let rev = self.inflight[&id].revision.as_str();
            if size < self.cfg.max_batch_requests && (distinct.contains(rev) || distinct.len() < self.cfg.gpu_slots) {
                distinct.insert(rev);
                size += 1;
                joiners.push(id);
            } else {
                waiting.push_back(id);
            }
        }
        let distinct_count = distinct.len();
        self.runnable = waiting;
        for id in &joiners {
            *self.gpu_resident.entry(self.inflight[id].revision.clone()).or_default() += 1;
        }
        self.running.extend(joiners.iter().copied());
        self.stats.max_batch_distinct = self.stats.max_batch_distinct.max(distinct_count);
        self.batches.push(BatchRecord {
            step: self.batches.len(),
            start_ms: self.now,
            end_ms: 0,
            requests: size,
            distinct_adapters: distinct_count,
            joiners: joiners.len(),
        });
        joiners
    }

    fn start_decode(&mut self) {
        let joiners = self.execute_batch();
        let l = &self.cfg.latency;
        let dur = (l.decode_ms + l.prefill_ms * joiners.len() as Millis).max(1);
        self.batches.last_mut().expect("just pushed").end_ms = self.now + dur;
        self.stats.decode_steps += 1;
        self.activity = Some((self.now + dur, Activity::Decode(joiners)));
    }

    fn finish_activation(&mut self, j: usize) {
        let revision = self.loader.job(j).revision_id.clone();
        let bytes = self.revisions[&revision].bytes;
        match self.cache.insert_evict(&revision, bytes) {
            Ok(evicted) => {
                self.stats.evictions += evicted.len();
                self.stats.loads_completed += 1;
                let job = self.loader.finish(j, true, self.now).clone();
                for w in &job.waiters {
                    let f = self.inflight.get_mut(w).expect("waiter in flight");
                    f.load_ms = self.now - f.req.arrival_ms;
                    f.runnable_since = self.now;
                    self.cache.pin(&revision);
                    self.runnable.push_back(*w);
                }
                if job.prewarm {
                    self.mark_ready(&revision);
                }
            }
            Err(e) => {
                let job = self.loader.finish(j, false, self.now).clone();
                for w in job.waiters {
                    let f = self.inflight.remove(&w).expect("waiter in flight");
                    self.reject(f.req, f.origin, f.attempt, Some(revision.clone()), e.clone());
                }
                if job.prewarm {
                    self.schedule_prewarm_retry(revision, 1);
                }
            }
        }
    }

    fn finish_decode(&mut self, joiners: Vec<RequestId>) {
        for id in joiners {
            self.inflight.get_mut(&id).expect("joiner in flight").first_token_ms = Some(self.now);
        }
        let mut still = Vec::with_capacity(self.running.len());
        let running = core::mem::take(&mut self.running);
        for id in running {
            let f = self.inflight.get_mut(&id).expect("running in flight");
            f.remaining -= 1;
            if f.remaining > 0 {
                still.push(id);
                continue;
            }
            let f = self.inflight.remove(&id).expect("present");
            self.cache.unpin(&f.revision);
            if let Some(n) = self.gpu_resident.get_mut(&f.revision) {
                *n -= 1;
                if *n == 0 {
                    self.gpu_resident.remove(&f.revision);
                }
            }
            let arrival = f.req.arrival_ms;
            self.traces.push(RequestTrace {
                request_id: f.req.id,
                origin_id: f.origin,
                attempt: f.attempt,
                policy: f.req.target.name().to_string(),
                revision_id: Some(f.revision),
                cohort: f.req.cohort,
                arrival_ms: arrival,
                path: f.path,
                ttft_ms: f.first_token_ms.expect("decoded at least once") - arrival,
                e2e_ms: self.now - arrival,
                load_ms: f.load_ms,
                reject_code: None,
            });
            self.release_client();
        }
        self.running = still;
        self.round_cap = None;
    }

    fn has_engine_work(&self) -> bool {
        self.loader.next_activation().is_some() || self.has_decode_work()
    }

    fn pop_event(&mut self) {
        let ((t, _), ev) = self.events.pop_first().expect("non-empty");
        self.now = self.now.max(t);
        self.handle(ev);
    }

    /// Advances to the next event or engine completion. Events due at the
    /// current instant are handled before the engine picks new work. Returns
    /// false when nothing is left to do.
    pub fn step_engine(&mut self) -> bool {
        let next_event = self.events.keys().next().map(|k| k.0);
        if let Some((end, _)) = &self.activity {
            if next_event.is_some_and(|t| t <= *end) {
                self.pop_event();
            } else {
                self.now = *end;
                match self.activity.take().expect("checked").1 {
                    Activity::Activate(j) => self.finish_activation(j),
                    Activity::Decode(joiners) => self.finish_decode(joiners),
                }
            }
            return true;
        }
        match next_event {
            Some(t) if t <= self.now => self.pop_event(),
            _ if self.has_engine_work() => self.start_activity(),
            Some(_) => self.pop_event(),
            None => return false,
        }
        true
    }

    pub fn run_to_completion(&mut self) {
        while self.step_engine() {}
    }

    pub fn into_output(mut self) -> SimOutput {
        self.stats.loads_rejected = self.loader.rejected;
        self.stats.peak_loading = self.loader.peak_loading;
        self.stats.peak_queued = self.loader.peak_queued;
        self.traces.sort_by_key(|t| t.request_id);
        SimOutput {
            traces: self.traces,
            batches: self.batches,
            load_jobs: self.loader.jobs().to_vec(),
            prewarm: self.prewarm,
            stats: self.stats,
            cpu_resident: self.cache.resident().map(String::from).collect(),
            readiness: self.revisions.into_values().map(|r| r.readiness).collect(),
            end_ms: self.now,
        }
    }
}
