//! Shared service state: immutable snapshots behind a swap, the single
//! writer path for plan and alignment changes, window bookkeeping and
//! persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Weak};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use blend_core::alignment::{update_alignment, AlignmentConfig, AlignmentParams, AnchorSample};
use blend_core::appender::Appender;
use blend_core::attribution::{plan_reports, rankings_from_events, PlanReport};
use blend_core::blender::{blend, BlendError, BlendRequest};
use blend_core::control::{apply_controller_outputs, DeliveryController};
use blend_core::model::{BlendDecision, Candidate, Plan, PlanMode, PlanRegistry, TimeWindow, Timestamp};
use blend_core::sim::outcome::{outcome_rng, sample_outcomes, EFFECTIVE_COMPLETION};
use blend_core::sim::{self, SimConfig, SCHEMA_VERSION};
use blend_core::tracking::{
    drift_score, percentile, read_segment_dir, read_segments_in, ExposureEvent, Stage, Tracker, TrackerConfig, DEFAULT_WINDOW_LEN,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),

    #[error("{0}")]
    NotFound(String),

    #[error("registry is at version {current}, not {expected}")]
    Conflict { expected: u64, current: u64 },

    #[error("window {0} is still open")]
    TooEarly(TimeWindow),

    #[error("{0}")]
    Unavailable(String),

    #[error("{0}")]
    Internal(String),
}

impl From<BlendError> for ServiceError {
    fn from(e: BlendError) -> Self {
        match e {
            BlendError::Alignment(a) => ServiceError::Unavailable(a.to_string()),
            BlendError::UnknownCandidate(c) => ServiceError::NotFound(c),
            other => ServiceError::BadRequest(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<blend_core::tracking::TrackingError> for ServiceError {
    fn from(e: blend_core::tracking::TrackingError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: Option<PathBuf>,
    /// Requests per tracking window and control tick.
    pub window_len: u64,
    /// Traffic model for `live_sim` mode, alignment bootstrap, and the
    /// initial plan registry.
    pub sim: SimConfig,
    /// Request rate of the live simulation.
    pub live_rps: f64,
    /// Pause between windows when replaying the log.
    pub replay_interval_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            data_dir: None,
            window_len: DEFAULT_WINDOW_LEN,
            sim: SimConfig::default(),
            live_rps: 2_000.0,
            replay_interval_ms: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LiveSim,
    Replay,
    #[default]
    Idle,
}

/// One consistent view used for a whole blend.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub registry: Arc<PlanRegistry>,
    pub alignment: Arc<AlignmentParams>,
}

/// What a served decision used. The ranking itself is in the event log,
/// one event per ranked candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub timestamp: Timestamp,
    pub request_id: String,
    pub registry_version: u64,
    pub exposed_k: usize,
    pub alignment_snapshot: AlignmentParams,
}

impl DecisionRecord {
    /// The full decision, given this request's events.
    pub fn decision(&self, events: &[ExposureEvent]) -> Result<BlendDecision, ServiceError> {
        let mut ranked: Vec<&ExposureEvent> = events
            .iter()
            .filter(|e| e.request_id == self.request_id && e.timestamp == self.timestamp)
            .collect();
        ranked.sort_by_key(|e| e.position);
        if ranked.iter().enumerate().any(|(i, e)| e.position != Some(i)) {
            return Err(ServiceError::Internal(format!("incomplete log for {}", self.request_id)));
        }
        Ok(BlendDecision {
            request_id: self.request_id.clone(),
            ranked: ranked.into_iter().map(|e| e.decomposition.clone()).collect(),
            exposed_k: self.exposed_k,
            registry_version: self.registry_version,
            alignment_snapshot: self.alignment_snapshot.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTick {
    pub exposure_share: Option<f64>,
    pub bias: f64,
    pub weight: f64,
    pub target_share: Option<f64>,
    /// Mean `|boost| / |final|` over exposed members.
    pub boost_ratio: Option<f64>,
}

/// One metrics-stream message per closed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickMessage {
    pub schema_version: u32,
    pub window_id: u64,
    pub window: TimeWindow,
    pub registry_version: u64,
    pub exposures: u64,
    pub plans: BTreeMap<String, PlanTick>,
    pub type_shares: BTreeMap<String, f64>,
    pub boost_ratio: f64,
    /// PSI of each stage against the previous window.
    pub drift: BTreeMap<String, Option<f64>>,
    pub mu_score: f64,
    pub mu_anchor: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct Progress {
    closed_until: Timestamp,
}

struct WindowBook {
    counts: BTreeMap<u64, u64>,
    next_close: u64,
}

pub struct ServiceState {
    config: ServiceConfig,
    snapshot: RwLock<Arc<Snapshot>>,
    history: RwLock<BTreeMap<u64, Arc<PlanRegistry>>>,
    writer: Mutex<()>,
    tracker: Tracker,
    decisions: Mutex<Vec<DecisionRecord>>,
    decision_log: Option<Appender>,
    clock: AtomicU64,
    live_seq: AtomicU64,
    windows: Mutex<WindowBook>,
    /// Exposed events of windows not yet closed.
    exposed: Mutex<BTreeMap<u64, Vec<ExposureEvent>>>,
    /// End of the last window whose requests are all in; its close may
    /// still be pending on the closer thread.
    complete_until: AtomicU64,
    closed_until: AtomicU64,
    closer: Sender<u64>,
    pending: Mutex<u64>,
    settled: Condvar,
    controller: Mutex<DeliveryController>,
    mode: Mutex<Mode>,
    pub(crate) task: Mutex<Option<tokio::task::JoinHandle<()>>>,
    stream: broadcast::Sender<Arc<TickMessage>>,
    latest: RwLock<Option<Arc<TickMessage>>>,
    truth: f64,
}

const REGISTRY: &str = "registry.json";
const REGISTRY_HISTORY: &str = "registry_history.jsonl";
const ALIGNMENT: &str = "alignment.json";
const CONTROLLER: &str = "controller.json";
const TRACKER: &str = "tracker.json";
const PROGRESS: &str = "progress.json";
const DECISIONS: &str = "decisions.jsonl";
const EVENTS: &str = "events";

fn write_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ServiceError> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut out, value)?;
        out.write_all(b"\n")?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, ServiceError> {
    match fs::read_to_string(path) {
        Ok(s) => serde_json::from_str(&s)
            .map(Some)
            .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ServiceError::Internal(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), ServiceError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

impl ServiceState {
    /// Load persisted state from `config.data_dir`, or bootstrap fresh state
    /// from the traffic model.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        config
            .sim
            .validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if config.window_len == 0 {
            return Err(ServiceError::BadRequest("window_len must be positive".into()));
        }
        let dir = config.data_dir.clone();
        if let Some(d) = &dir {
            fs::create_dir_all(d.join(EVENTS))?;
        }
        let load = |name: &str| dir.as_ref().map(|d| d.join(name));

        let registry: PlanRegistry = match load(REGISTRY) {
            Some(p) => read_json(&p)?,
            None => None,
        }
        .unwrap_or_else(|| config.sim.plans.clone());
        let alignment: AlignmentParams = match load(ALIGNMENT) {
            Some(p) => read_json(&p)?,
            None => None,
        }
        .map(Ok)
        .unwrap_or_else(|| sim::runner::warmup_alignment(&config.sim))
        .map_err(|e| ServiceError::Unavailable(e.to_string()))?;
        // degenerate loaded parameters are kept: blends answer 503 until fixed
        let controller: DeliveryController = match load(CONTROLLER) {
            Some(p) => read_json(&p)?,
            None => None,
        }
        .unwrap_or_default();
        let mut tracker_cfg: TrackerConfig = match load(TRACKER) {
            Some(p) => read_json(&p)?,
            None => None,
        }
        .unwrap_or_else(|| {
            let raws: Vec<f64> = (0..200)
                .flat_map(|t| sim::generate_request(&config.sim, t).candidates)
                .map(|c| c.raw_score)
                .collect();
            let anchor_hi = 2.0 * alignment.mu_anchor;
            let anchor_hi = if anchor_hi.is_finite() && anchor_hi > 0.0 { anchor_hi } else { 1.0 };
            let mut cfg = TrackerConfig::new(percentile(&raws, 0.99), anchor_hi);
            cfg.window_len = config.window_len;
            cfg
        });
        // with a data dir the full log lives in its segments only
        tracker_cfg.retain_log = dir.is_none();
        let progress: Progress = match load(PROGRESS) {
            Some(p) => read_json(&p)?,
            None => None,
        }
        .unwrap_or_default();

        let mut history: BTreeMap<u64, Arc<PlanRegistry>> = match load(REGISTRY_HISTORY) {
            Some(p) => read_jsonl::<PlanRegistry>(&p)?
                .into_iter()
                .map(|r| (r.version(), Arc::new(r)))
                .collect(),
            None => BTreeMap::new(),
        };
        history.insert(registry.version(), Arc::new(registry.clone()));

        let tracker = Tracker::new(tracker_cfg);
        tracker.register_plans(registry.plans().iter().map(|p| p.plan_id.clone()));
        let mut clock = 0;
        let mut counts: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
        let mut exposed: BTreeMap<u64, Vec<ExposureEvent>> = BTreeMap::new();
        let next_close = progress.closed_until / tracker_cfg.window_len;
        let decisions: Vec<DecisionRecord> = match load(DECISIONS) {
            Some(p) => read_jsonl(&p)?,
            None => Vec::new(),
        };
        let tracker = match &dir {
            Some(d) => {
                let events = read_segment_dir(&d.join(EVENTS))?;
                for e in &events {
                    clock = clock.max(e.timestamp + 1);
                    let wid = e.timestamp / tracker_cfg.window_len;
                    counts.entry(wid).or_default().insert(e.request_id.clone());
                    if e.exposed && wid >= next_close {
                        exposed.entry(wid).or_default().push(e.clone());
                    }
                }
                tracker.record_batch(events)?;
                tracker.with_segment_dir(d.join(EVENTS))?
            }
            None => tracker,
        };
        for d in &decisions {
            clock = clock.max(d.timestamp + 1);
        }
        let decision_log = match &dir {
            Some(d) => Some(Appender::new(d)?),
            None => None,
        };

        let (tx, _) = broadcast::channel(256);
        let (closer, closer_rx) = channel();
        let truth = config.sim.true_scale();
        let state = Arc::new(Self {
            snapshot: RwLock::new(Arc::new(Snapshot {
                registry: Arc::new(registry),
                alignment: Arc::new(alignment),
            })),
            history: RwLock::new(history),
            writer: Mutex::new(()),
            tracker,
            decisions: Mutex::new(decisions),
            decision_log,
            clock: AtomicU64::new(clock),
            live_seq: AtomicU64::new(clock),
            windows: Mutex::new(WindowBook {
                counts: counts
                    .into_iter()
                    .filter(|(w, _)| *w >= next_close)
                    .map(|(w, r)| (w, r.len() as u64))
                    .collect(),
                next_close,
            }),
            exposed: Mutex::new(exposed),
            complete_until: AtomicU64::new(progress.closed_until),
            closed_until: AtomicU64::new(progress.closed_until),
            closer,
            pending: Mutex::new(0),
            settled: Condvar::new(),
            controller: Mutex::new(controller),
            mode: Mutex::new(Mode::Idle),
            task: Mutex::new(None),
            stream: tx,
            latest: RwLock::new(None),
            truth,
            config,
        });
        state.persist_all()?;
        let weak = Arc::downgrade(&state);
        std::thread::Builder::new()
            .name("window-closer".into())
            .spawn(move || closer_loop(weak, closer_rx))?;
        // windows completed before a crash but never closed
        state.advance(&mut state.windows.lock());
        Ok(state)
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.config.data_dir.as_ref().map(|d| d.join(name))
    }

    fn persist_all(&self) -> Result<(), ServiceError> {
        let snap = self.snapshot();
        if let Some(p) = self.path(REGISTRY) {
            write_atomic(&p, snap.registry.as_ref())?;
        }
        if let Some(p) = self.path(ALIGNMENT) {
            write_atomic(&p, snap.alignment.as_ref())?;
        }
        if let Some(p) = self.path(TRACKER) {
            write_atomic(&p, self.tracker.config())?;
        }
        self.persist_controller()?;
        if let Some(p) = self.path(REGISTRY_HISTORY) {
            if !p.exists() {
                append_line(&p, snap.registry.as_ref())?;
            }
        }
        Ok(())
    }

    fn persist_controller(&self) -> Result<(), ServiceError> {
        if let Some(p) = self.path(CONTROLLER) {
            write_atomic(&p, &*self.controller.lock())?;
        }
        if let Some(p) = self.path(PROGRESS) {
            write_atomic(
                &p,
                &Progress {
                    closed_until: self.closed_until.load(Ordering::SeqCst),
                },
            )?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn requests(&self) -> u64 {
        self.clock.load(Ordering::SeqCst)
    }

    pub fn closed_until(&self) -> Timestamp {
        self.closed_until.load(Ordering::SeqCst)
    }

    pub fn mode(&self) -> Mode {
        *self.mode.lock()
    }

    pub(crate) fn set_mode_flag(&self, mode: Mode) {
        *self.mode.lock() = mode;
    }

    pub fn registry_at(&self, version: u64) -> Option<Arc<PlanRegistry>> {
        self.history.read().get(&version).cloned()
    }

    pub fn controller(&self) -> DeliveryController {
        self.controller.lock().clone()
    }

    pub fn decisions(&self) -> Vec<DecisionRecord> {
        self.decisions.lock().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<TickMessage>> {
        self.stream.subscribe()
    }

    pub fn latest_tick(&self) -> Option<Arc<TickMessage>> {
        self.latest.read().clone()
    }

    /// Swap in a registry built from the current one. All registry writes go
    /// through here.
    pub fn update_registry<F>(&self, expected_version: Option<u64>, f: F) -> Result<Arc<PlanRegistry>, ServiceError>
    where
        F: FnOnce(&PlanRegistry) -> Result<PlanRegistry, ServiceError>,
    {
        let _w = self.writer.lock();
        let current = self.snapshot();
        if let Some(expected) = expected_version {
            if expected != current.registry.version() {
                return Err(ServiceError::Conflict {
                    expected,
                    current: current.registry.version(),
                });
            }
        }
        let next = Arc::new(f(&current.registry)?);
        self.tracker
            .register_plans(next.plans().iter().map(|p| p.plan_id.clone()));
        self.history.write().insert(next.version(), next.clone());
        *self.snapshot.write() = Arc::new(Snapshot {
            registry: next.clone(),
            alignment: current.alignment.clone(),
        });
        if let Some(p) = self.path(REGISTRY) {
            write_atomic(&p, next.as_ref())?;
        }
        if let Some(p) = self.path(REGISTRY_HISTORY) {
            append_line(&p, next.as_ref())?;
        }
        Ok(next)
    }

    fn update_alignment_params(&self, params: AlignmentParams) -> Result<(), ServiceError> {
        let _w = self.writer.lock();
        let current = self.snapshot();
        *self.snapshot.write() = Arc::new(Snapshot {
            registry: current.registry.clone(),
            alignment: Arc::new(params.clone()),
        });
        if let Some(p) = self.path(ALIGNMENT) {
            write_atomic(&p, &params)?;
        }
        Ok(())
    }

    pub fn upsert_plan(&self, plan: Plan, expected_version: Option<u64>) -> Result<Arc<PlanRegistry>, ServiceError> {
        self.update_registry(expected_version, |r| {
            r.upsert(plan).map_err(|e| ServiceError::BadRequest(e.to_string()))
        })
    }

    pub fn replace_plans(&self, plans: Vec<Plan>, expected_version: Option<u64>) -> Result<Arc<PlanRegistry>, ServiceError> {
        self.update_registry(expected_version, |r| {
            let next = PlanRegistry::new(plans).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            Ok(next.with_version(r.version() + 1))
        })
    }

    pub fn delete_plan(&self, plan_id: &str, expected_version: Option<u64>) -> Result<Arc<PlanRegistry>, ServiceError> {
        self.update_registry(expected_version, |r| {
            if !r.contains(plan_id) {
                return Err(ServiceError::NotFound(format!("unknown plan {plan_id:?}")));
            }
            r.remove(plan_id).map_err(|e| ServiceError::BadRequest(e.to_string()))
        })
    }

    /// Serve one request: blend under a single snapshot, log every ranked
    /// candidate, then account the request to its window.
    pub fn blend(&self, request: BlendRequest) -> Result<BlendDecision, ServiceError> {
        self.serve(request, |_, _, _| None)
    }

    fn serve<F>(&self, request: BlendRequest, mut outcomes: F) -> Result<BlendDecision, ServiceError>
    where
        F: FnMut(Timestamp, usize, &Candidate) -> Option<BTreeMap<String, f64>>,
    {
        request.validate()?;
        let snap = self.snapshot();
        snap.alignment
            .validate()
            .map_err(|e| ServiceError::Unavailable(e.to_string()))?;
        let mut decision = blend(&request, &snap.registry, &snap.alignment)?;
        let ts = self.clock.fetch_add(1, Ordering::SeqCst);
        let by_id: BTreeMap<&str, (usize, &Candidate)> = request
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), (i, c)))
            .collect();
        // decompositions move into the events and back, so none is cloned
        let events: Vec<ExposureEvent> = std::mem::take(&mut decision.ranked)
            .into_iter()
            .enumerate()
            .map(|(pos, d)| {
                let (idx, cand) = by_id[d.candidate_id.as_str()];
                let exposed = pos < decision.exposed_k;
                ExposureEvent {
                    request_id: decision.request_id.clone(),
                    timestamp: ts,
                    candidate_id: d.candidate_id.clone(),
                    content_type: cand.content_type.clone(),
                    tags: cand.tags.clone(),
                    decomposition: d,
                    exposed,
                    position: Some(pos),
                    outcomes: if exposed { outcomes(ts, idx, cand) } else { None },
                }
            })
            .collect();
        let logged = DecisionRecord {
            timestamp: ts,
            request_id: decision.request_id.clone(),
            registry_version: decision.registry_version,
            exposed_k: decision.exposed_k,
            alignment_snapshot: decision.alignment_snapshot.clone(),
        };
        let shown: Vec<ExposureEvent> = events.iter().filter(|e| e.exposed).cloned().collect();
        self.exposed
            .lock()
            .entry(ts / self.tracker.config().window_len)
            .or_default()
            .extend(shown);
        let result = self.tracker.record_slice(&events).map_err(ServiceError::from).and_then(|_| {
            if let Some(out) = &self.decision_log {
                let mut line = serde_json::to_vec(&logged)?;
                line.push(b'\n');
                out.append(DECISIONS, line)?;
            }
            Ok(())
        });
        decision.ranked = events.into_iter().map(|e| e.decomposition).collect();
        self.decisions.lock().push(logged);
        self.account(ts);
        result?;
        Ok(decision)
    }

    /// One simulated request with outcomes drawn from the traffic model.
    pub fn serve_simulated(&self) -> Result<BlendDecision, ServiceError> {
        // never above the clock, so ids stay unique across restarts
        let t = self.live_seq.fetch_add(1, Ordering::SeqCst);
        let mut req = sim::generate_request(&self.config.sim, t);
        req.request_id = format!("live-{t}");
        let model = self.config.sim.outcome_model.clone();
        let seed = self.config.sim.seed;
        let truth = self.truth;
        self.serve(req, |ts, idx, cand| {
            Some(sample_outcomes(
                &model,
                cand.raw_score * truth,
                &cand.content_type,
                &mut outcome_rng(seed, ts, idx as u64),
            ))
        })
    }

    fn account(&self, ts: Timestamp) {
        let len = self.tracker.config().window_len;
        let mut book = self.windows.lock();
        *book.counts.entry(ts / len).or_default() += 1;
        self.advance(&mut book);
    }

    /// Hand every complete window, in order, to the closer thread.
    fn advance(&self, book: &mut WindowBook) {
        let len = self.tracker.config().window_len;
        while book.counts.get(&book.next_close).is_some_and(|c| *c >= len) {
            let wid = book.next_close;
            book.counts.remove(&wid);
            book.next_close += 1;
            self.complete_until.store((wid + 1) * len, Ordering::SeqCst);
            *self.pending.lock() += 1;
            if self.closer.send(wid).is_err() {
                *self.pending.lock() -= 1;
            }
        }
    }

    /// Block until every complete window has been closed.
    pub fn settle(&self) {
        let mut pending = self.pending.lock();
        while *pending > 0 {
            self.settled.wait(&mut pending);
        }
    }

    fn close_window(&self, wid: u64) -> Result<(), ServiceError> {
        let len = self.tracker.config().window_len;
        let window = TimeWindow::nth(wid, len);
        let events = self.exposed.lock().remove(&wid).unwrap_or_default();
        let snap = self.snapshot();

        let ticks = {
            let mut controller = self.controller.lock();
            controller
                .tick(&snap.registry, &events, window)
                .map_err(|e| ServiceError::Internal(e.to_string()))?
                .1
        };
        if !ticks.is_empty() {
            self.update_registry(None, |current| {
                let outputs: BTreeMap<String, f64> = ticks
                    .iter()
                    .filter(|t| {
                        current
                            .get(&t.plan_id)
                            .is_some_and(|p| p.mode == PlanMode::PidDelivered)
                    })
                    .map(|t| (t.plan_id.clone(), t.bias))
                    .collect();
                if outputs.is_empty() {
                    return Ok(current.clone());
                }
                apply_controller_outputs(current, &outputs).map_err(|e| ServiceError::Internal(e.to_string()))
            })?;
        }

        let samples: Vec<AnchorSample> = events
            .iter()
            .filter_map(|e| {
                e.outcome(EFFECTIVE_COMPLETION)
                    .map(|o| AnchorSample::new(e.decomposition.raw, o))
            })
            .collect();
        if !samples.is_empty() {
            let cfg = AlignmentConfig {
                half_life: snap.alignment.half_life,
                ..AlignmentConfig::default()
            };
            let mut next = update_alignment(&snap.alignment, &samples, &cfg);
            next.updated_at = window.end;
            self.update_alignment_params(next)?;
        }

        self.closed_until.store(window.end, Ordering::SeqCst);
        self.persist_controller()?;
        let msg = Arc::new(self.tick_message(wid, &events));
        *self.latest.write() = Some(msg.clone());
        let _ = self.stream.send(msg);
        Ok(())
    }

    /// Metrics for window `wid` from its events.
    pub fn tick_message(&self, wid: u64, events: &[ExposureEvent]) -> TickMessage {
        let len = self.tracker.config().window_len;
        let window = TimeWindow::nth(wid, len);
        let snap = self.snapshot();
        let exposed: Vec<&ExposureEvent> = events.iter().filter(|e| e.exposed).collect();
        let n = exposed.len() as f64;
        let mut type_counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut ratio_sum = 0.0;
        for e in &exposed {
            *type_counts.entry(e.content_type.as_str().to_string()).or_default() += 1;
            let d = &e.decomposition;
            if d.final_score != 0.0 {
                ratio_sum += (d.final_score - d.aligned).abs() / d.final_score.abs();
            }
        }
        let plans = snap
            .registry
            .plans()
            .iter()
            .map(|p| {
                let members: Vec<&&ExposureEvent> = exposed
                    .iter()
                    .filter(|e| p.selector.matches(&e.content_type, &e.tags))
                    .collect();
                let boosted: Vec<f64> = exposed
                    .iter()
                    .filter_map(|e| {
                        let d = &e.decomposition;
                        d.plan_boosts
                            .get(&p.plan_id)
                            .filter(|_| d.final_score != 0.0)
                            .map(|b| b.abs() / d.final_score.abs())
                    })
                    .collect();
                (
                    p.plan_id.clone(),
                    PlanTick {
                        exposure_share: (n > 0.0).then(|| members.len() as f64 / n),
                        bias: p.bias,
                        weight: p.weight,
                        target_share: p.target_share,
                        boost_ratio: (!boosted.is_empty()).then(|| boosted.iter().sum::<f64>() / boosted.len() as f64),
                    },
                )
            })
            .collect();

        let mut drift = BTreeMap::new();
        if wid > 0 {
            let prev = TimeWindow::nth(wid - 1, len);
            let mut stages = vec![Stage::Raw, Stage::Aligned, Stage::Final];
            stages.extend(snap.registry.plans().iter().map(|p| Stage::Boost(p.plan_id.clone())));
            for stage in stages {
                let label = match &stage {
                    Stage::Raw => "raw".to_string(),
                    Stage::Aligned => "aligned".to_string(),
                    Stage::Final => "final".to_string(),
                    Stage::Boost(p) => format!("boost:{p}"),
                };
                let score = match (self.tracker.histogram(&stage, prev), self.tracker.histogram(&stage, window)) {
                    (Ok(a), Ok(b)) => drift_score(&a, &b).ok(),
                    _ => None,
                };
                drift.insert(label, score);
            }
        }

        TickMessage {
            schema_version: SCHEMA_VERSION,
            window_id: wid,
            window,
            registry_version: snap.registry.version(),
            exposures: exposed.len() as u64,
            plans,
            type_shares: type_counts
                .into_iter()
                .map(|(k, c)| (k, c as f64 / n.max(1.0)))
                .collect(),
            boost_ratio: if n > 0.0 { ratio_sum / n } else { 0.0 },
            drift,
            mu_score: snap.alignment.mu_score,
            mu_anchor: snap.alignment.mu_anchor,
        }
    }

    /// Re-emit stream messages for every closed window in the log.
    /// Number of closed windows, after pending closes finish.
    pub(crate) fn closed_windows(&self) -> u64 {
        self.settle();
        self.closed_until() / self.tracker.config().window_len
    }

    /// The stream message of closed window `wid`, rebuilt from the log.
    pub(crate) fn replay_message(&self, wid: u64) -> Result<TickMessage, ServiceError> {
        let events = self.events_in(TimeWindow::nth(wid, self.tracker.config().window_len))?;
        Ok(self.tick_message(wid, &events))
    }

    /// Logged events with timestamps in `window`.
    pub fn events_in(&self, window: TimeWindow) -> Result<Vec<ExposureEvent>, ServiceError> {
        match &self.config.data_dir {
            Some(d) if !self.tracker.config().retain_log => {
                self.tracker.flush()?;
                Ok(read_segments_in(&d.join(EVENTS), window, self.tracker.config().window_len)?)
            }
            _ => Ok(self.tracker.events_in(window)),
        }
    }

    pub(crate) fn publish(&self, msg: TickMessage) {
        let msg = Arc::new(msg);
        *self.latest.write() = Some(msg.clone());
        let _ = self.stream.send(msg);
    }

    /// Decisions for the same request under the current registry and under
    /// a copy with `overrides` applied. Nothing is logged.
    pub fn whatif(
        &self,
        request: &BlendRequest,
        overrides: &BTreeMap<String, PlanOverride>,
    ) -> Result<(BlendDecision, BlendDecision), ServiceError> {
        let snap = self.snapshot();
        for id in overrides.keys() {
            if !snap.registry.contains(id) {
                return Err(ServiceError::NotFound(format!("unknown plan {id:?}")));
            }
        }
        let hypothetical = snap
            .registry
            .modify(overrides.keys(), |p| {
                overrides[&p.plan_id].apply(p);
                Ok(())
            })
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?
            .with_version(snap.registry.version());
        let current = blend(request, &snap.registry, &snap.alignment)?;
        let other = blend(request, &hypothetical, &snap.alignment)?;
        Ok((current, other))
    }

    /// Attribution over a closed window.
    pub fn reports(&self, window: TimeWindow) -> Result<Vec<PlanReport>, ServiceError> {
        if window.end <= window.start {
            return Err(ServiceError::BadRequest(format!("empty window {window}")));
        }
        if window.end > self.complete_until.load(Ordering::SeqCst) {
            return Err(ServiceError::TooEarly(window));
        }
        self.settle();
        let events = self.events_in(window)?;
        let rankings = rankings_from_events(&events).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let registry = self.snapshot().registry.clone();
        plan_reports(&events, &rankings, &registry, window).map_err(|e| match e {
            blend_core::attribution::AttributionError::UnknownPlan(p) => ServiceError::NotFound(p),
            other => ServiceError::Internal(other.to_string()),
        })
    }

    pub fn flush(&self) -> Result<(), ServiceError> {
        self.settle();
        self.tracker.flush()?;
        if let Some(out) = &self.decision_log {
            out.flush()?;
        }
        self.persist_controller()
    }
}

fn closer_loop(state: Weak<ServiceState>, rx: Receiver<u64>) {
    while let Ok(wid) = rx.recv() {
        let Some(s) = state.upgrade() else { break };
        if let Err(e) = s.close_window(wid) {
            eprintln!("closing window {wid}: {e}");
        }
        let mut pending = s.pending.lock();
        *pending -= 1;
        if *pending == 0 {
            s.settled.notify_all();
        }
    }
}

/// Partial plan edit used by what-if evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOverride {
    #[serde(default)]
    pub weight: Option<f64>,
    #[serde(default)]
    pub bias: Option<f64>,
    #[serde(default)]
    pub enabled: Option<bool>,
}

impl PlanOverride {
    fn apply(&self, plan: &mut Plan) {
        if let Some(w) = self.weight {
            plan.weight = w;
        }
        if let Some(b) = self.bias {
            plan.bias = b;
        }
        if let Some(e) = self.enabled {
            plan.enabled = e;
        }
    }
}
