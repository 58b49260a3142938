//! Near-line distribution tracking: an append-only exposure log, per-window
//! histograms of every pipeline stage, and PSI drift scoring between them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appender::Appender;
use crate::model::{ContentType, ScoreDecomposition, TimeWindow, Timestamp};

pub const DEFAULT_WINDOW_LEN: u64 = 500;
pub const DEFAULT_BINS: usize = 50;
const PSI_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("unknown plan {0:?}")]
    UnknownPlan(String),

    #[error("histograms have different bin edges")]
    BinMismatch,

    #[error("histogram has no observations")]
    EmptyHistogram,

    #[error("window {0} is not cached and the raw log is not retained")]
    LogNotRetained(TimeWindow),

    #[error("malformed event log {path}:{line}: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One logged ranking slot, joined with its posterior outcomes when exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub request_id: String,
    pub timestamp: Timestamp,
    pub candidate_id: String,
    pub content_type: ContentType,
    /// Candidate tags at log time, so plan selectors can be re-evaluated.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tags: BTreeSet<String>,
    pub decomposition: ScoreDecomposition,
    pub exposed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<BTreeMap<String, f64>>,
}

impl ExposureEvent {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if self.outcomes.is_some() && !self.exposed {
            return Err(TrackingError::InvalidEvent(format!(
                "{}/{}: outcomes on an unexposed item",
                self.request_id, self.candidate_id
            )));
        }
        if self.decomposition.candidate_id != self.candidate_id {
            return Err(TrackingError::InvalidEvent(format!(
                "{}/{}: decomposition is for {}",
                self.request_id, self.candidate_id, self.decomposition.candidate_id
            )));
        }
        if !self.decomposition.is_additive() {
            return Err(TrackingError::InvalidEvent(format!(
                "{}/{}: final does not equal aligned plus boosts",
                self.request_id, self.candidate_id
            )));
        }
        Ok(())
    }

    pub fn outcome(&self, metric: &str) -> Option<f64> {
        self.outcomes.as_ref().and_then(|o| o.get(metric).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Aligned,
    Boost(String),
    Final,
}

impl Stage {
    fn value(&self, d: &ScoreDecomposition) -> Option<f64> {
        match self {
            Stage::Raw => Some(d.raw),
            Stage::Aligned => Some(d.aligned),
            Stage::Boost(plan) => d.plan_boosts.get(plan).copied(),
            Stage::Final => Some(d.final_score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistogram {
    pub stage: Stage,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub window: TimeWindow,
}

impl StageHistogram {
    pub fn proportions(&self) -> Vec<f64> {
        let total = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Fixed-width bins. Values outside the range land in the edge bins so that
/// every observation is counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    edges: Vec<f64>,
}

impl Bins {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        let n = n.max(1);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / n as f64;
        let mut edges: Vec<f64> = (0..n).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        Self { edges }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, v: f64) -> usize {
        let i = self.edges.partition_point(|&e| e <= v);
        i.saturating_sub(1).min(self.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub window_len: u64,
    pub bins: usize,
    /// Keep every event in memory. When off, only per-window histogram
    /// caches survive a window.
    pub retain_log: bool,
    /// Upper end of the raw-score histogram range.
    pub raw_hi: f64,
    /// Upper end of the aligned/boost/final range, normally `2 * mu_anchor`.
    pub anchor_hi: f64,
}

impl TrackerConfig {
    pub fn new(raw_hi: f64, anchor_hi: f64) -> Self {
        Self {
            window_len: DEFAULT_WINDOW_LEN,
            bins: DEFAULT_BINS,
            retain_log: true,
            raw_hi,
            anchor_hi,
        }
    }

    /// Ranges derived from bootstrap data: `[0, p99(raw)]` and `[0, 2 mu_anchor]`.
    pub fn from_bootstrap(raw_scores: &[f64], mu_anchor: f64) -> Self {
        Self::new(percentile(raw_scores, 0.99), 2.0 * mu_anchor)
    }

    fn bins_for(&self, stage: &Stage) -> Bins {
        match stage {
            Stage::Raw => Bins::uniform(0.0, self.raw_hi, self.bins),
            _ => Bins::uniform(0.0, self.anchor_hi, self.bins),
        }
    }

    pub fn window(&self, id: u64) -> TimeWindow {
        TimeWindow::nth(id, self.window_len)
    }

    pub fn window_id(&self, ts: Timestamp) -> u64 {
        ts / self.window_len
    }
}

/// Nearest-rank percentile; 1.0 for empty input.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    Recorded,
    Duplicate,
}

#[derive(Debug, Clone, Default)]
struct WindowCounts {
    raw: Vec<u64>,
    aligned: Vec<u64>,
    final_: Vec<u64>,
    boost: BTreeMap<String, Vec<u64>>,
}

impl WindowCounts {
    fn new(n: usize) -> Self {
        Self {
            raw: vec![0; n],
            aligned: vec![0; n],
            final_: vec![0; n],
            boost: BTreeMap::new(),
        }
    }

    fn fold(&mut self, d: &ScoreDecomposition, raw_bins: &Bins, anchor_bins: &Bins) {
        self.raw[raw_bins.index(d.raw)] += 1;
        self.aligned[anchor_bins.index(d.aligned)] += 1;
        self.final_[anchor_bins.index(d.final_score)] += 1;
        for (plan, b) in &d.plan_boosts {
            let i = anchor_bins.index(*b);
            match self.boost.get_mut(plan) {
                Some(counts) => counts[i] += 1,
                None => {
                    let mut counts = vec![0; anchor_bins.len()];
                    counts[i] += 1;
                    self.boost.insert(plan.clone(), counts);
                }
            }
        }
    }

    fn counts(&self, stage: &Stage, n: usize) -> Vec<u64> {
        match stage {
            Stage::Raw => self.raw.clone(),
            Stage::Aligned => self.aligned.clone(),
            Stage::Final => self.final_.clone(),
            Stage::Boost(p) => self.boost.get(p).cloned().unwrap_or_else(|| vec![0; n]),
        }
    }
}

/// Expired per-request key sets freed on each call.
const RETIRE_PER_CALL: usize = 4;

fn segment_name(window: u64) -> String {
    format!("{window:08}.events.jsonl")
}

struct Inner {
    log: Vec<ExposureEvent>,
    recorded: u64,
    /// Seen candidate ids per request, for the latest two windows.
    keys: BTreeMap<u64, HashMap<String, HashSet<String>>>,
    /// Key sets of expired windows, freed a few per call to keep the
    /// request path free of large drops.
    retired: Vec<HashSet<String>>,
    cache: BTreeMap<u64, WindowCounts>,
    plans: BTreeSet<String>,
    /// Serialized lines per window, sent to the appender after each call.
    pending: BTreeMap<u64, Vec<u8>>,
}

/// Multi-producer event sink with per-window histogram caches.
pub struct Tracker {
    config: TrackerConfig,
    raw_bins: Bins,
    anchor_bins: Bins,
    inner: Mutex<Inner>,
    sink: Option<Appender>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            raw_bins: config.bins_for(&Stage::Raw),
            anchor_bins: config.bins_for(&Stage::Aligned),
            config,
            inner: Mutex::new(Inner {
                log: Vec::new(),
                recorded: 0,
                keys: BTreeMap::new(),
                retired: Vec::new(),
                cache: BTreeMap::new(),
                plans: BTreeSet::new(),
                pending: BTreeMap::new(),
            }),
            sink: None,
        }
    }

    /// Also append every recorded event to `<dir>/<window:08>.events.jsonl`.
    /// Writes happen on a background thread; `flush` waits for them.
    pub fn with_segment_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, TrackingError> {
        self.sink = Some(Appender::new(dir)?);
        Ok(self)
    }

    fn ship(&self, inner: &mut Inner) -> Result<(), TrackingError> {
        let keep = inner.retired.len().saturating_sub(RETIRE_PER_CALL);
        inner.retired.truncate(keep);
        if let Some(sink) = &self.sink {
            for (w, bytes) in std::mem::take(&mut inner.pending) {
                sink.append(&segment_name(w), bytes)?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Declare plans so that `boost(plan)` histograms resolve before the plan
    /// has matched anything.
    pub fn register_plans<I, S>(&self, plans: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut inner = self.inner.lock();
        inner.plans.extend(plans.into_iter().map(Into::into));
    }

    pub fn record(&self, event: ExposureEvent) -> Result<Ack, TrackingError> {
        let mut inner = self.inner.lock();
        let ack = self.admit(&mut inner, &event);
        if matches!(ack, Ok(Ack::Recorded)) && self.config.retain_log {
            inner.log.push(event);
        }
        self.ship(&mut inner)?;
        ack
    }

    pub fn record_batch(&self, events: impl IntoIterator<Item = ExposureEvent>) -> Result<usize, TrackingError> {
        self.record_each(events, |e| e)
    }

    /// Like `record_batch`, but clones only the events the log retains.
    pub fn record_slice(&self, events: &[ExposureEvent]) -> Result<usize, TrackingError> {
        self.record_each(events, ExposureEvent::clone)
    }

    fn record_each<E: std::borrow::Borrow<ExposureEvent>>(
        &self,
        events: impl IntoIterator<Item = E>,
        own: impl Fn(E) -> ExposureEvent,
    ) -> Result<usize, TrackingError> {
        let mut inner = self.inner.lock();
        let mut n = 0;
        for e in events {
            match self.admit(&mut inner, e.borrow()) {
                Ok(Ack::Recorded) => {
                    n += 1;
                    if self.config.retain_log {
                        inner.log.push(own(e));
                    }
                }
                Ok(Ack::Duplicate) => {}
                Err(err) => {
                    self.ship(&mut inner)?;
                    return Err(err);
                }
            }
        }
        self.ship(&mut inner)?;
        Ok(n)
    }

    /// Deduplicate, fold and serialize one event; the caller keeps the log.
    fn admit(&self, inner: &mut Inner, event: &ExposureEvent) -> Result<Ack, TrackingError> {
        event.validate()?;
        let wid = self.config.window_id(event.timestamp);
        let opened = !inner.keys.contains_key(&wid);
        let seen = inner.keys.entry(wid).or_default();
        let fresh = match seen.get_mut(event.request_id.as_str()) {
            Some(ids) => ids.insert(event.candidate_id.clone()),
            None => {
                seen.insert(event.request_id.clone(), HashSet::from([event.candidate_id.clone()]));
                true
            }
        };
        // only the latest two windows keep their key sets
        if opened {
            let latest = *inner.keys.keys().next_back().expect("just inserted");
            while let Some(entry) = inner.keys.first_entry() {
                if *entry.key() + 1 >= latest {
                    break;
                }
                let expired = entry.remove();
                inner.retired.extend(expired.into_values());
            }
        }
        if !fresh {
            return Ok(Ack::Duplicate);
        }
        let bins = self.anchor_bins.len();
        inner
            .cache
            .entry(wid)
            .or_insert_with(|| WindowCounts::new(bins))
            .fold(&event.decomposition, &self.raw_bins, &self.anchor_bins);
        for plan in event.decomposition.plan_boosts.keys() {
            if !inner.plans.contains(plan.as_str()) {
                inner.plans.insert(plan.clone());
            }
        }
        if self.sink.is_some() {
            let buf = inner.pending.entry(wid).or_default();
            serde_json::to_writer(&mut *buf, event).map_err(std::io::Error::from)?;
            buf.push(b'\n');
        }
        inner.recorded += 1;
        Ok(Ack::Recorded)
    }

    /// Number of events accepted (duplicates excluded).
    pub fn len(&self) -> u64 {
        self.inner.lock().recorded
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<ExposureEvent> {
        self.inner.lock().log.clone()
    }

    pub fn events_in(&self, window: TimeWindow) -> Vec<ExposureEvent> {
        self.inner
            .lock()
            .log
            .iter()
            .filter(|e| window.contains(e.timestamp))
            .cloned()
            .collect()
    }

    pub fn known_plans(&self) -> BTreeSet<String> {
        self.inner.lock().plans.clone()
    }

    /// Histogram of `stage` over `window`. Whole tracking windows come from
    /// the cache; any other range is folded from the retained log.
    pub fn histogram(&self, stage: &Stage, window: TimeWindow) -> Result<StageHistogram, TrackingError> {
        let inner = self.inner.lock();
        if let Stage::Boost(plan) = stage {
            if !inner.plans.contains(plan) {
                return Err(TrackingError::UnknownPlan(plan.clone()));
            }
        }
        let bins = self.config.bins_for(stage);
        let n = bins.len();
        let len = self.config.window_len;
        let aligned = window.start % len == 0 && window.end == window.start + len;
        let counts = if aligned {
            match inner.cache.get(&(window.start / len)) {
                Some(c) => c.counts(stage, n),
                None => vec![0; n],
            }
        } else if self.config.retain_log {
            fold_counts(inner.log.iter(), stage, window, &bins)
        } else {
            return Err(TrackingError::LogNotRetained(window));
        };
        Ok(StageHistogram {
            stage: stage.clone(),
            bin_edges: bins.edges().to_vec(),
            total: counts.iter().sum(),
            counts,
            window,
        })
    }

    /// Recompute a histogram straight from the retained log, bypassing the
    /// cache.
    pub fn histogram_from_log(&self, stage: &Stage, window: TimeWindow) -> StageHistogram {
        let inner = self.inner.lock();
        let bins = self.config.bins_for(stage);
        let counts = fold_counts(inner.log.iter(), stage, window, &bins);
        StageHistogram {
            stage: stage.clone(),
            bin_edges: bins.edges().to_vec(),
            total: counts.iter().sum(),
            counts,
            window,
        }
    }

    pub fn flush(&self) -> Result<(), TrackingError> {
        if let Some(sink) = &self.sink {
            sink.flush()?;
        }
        Ok(())
    }
}

fn fold_counts<'a>(
    events: impl Iterator<Item = &'a ExposureEvent>,
    stage: &Stage,
    window: TimeWindow,
    bins: &Bins,
) -> Vec<u64> {
    let mut counts = vec![0; bins.len()];
    for e in events.filter(|e| window.contains(e.timestamp)) {
        if let Some(v) = stage.value(&e.decomposition) {
            counts[bins.index(v)] += 1;
        }
    }
    counts
}

/// Population stability index `sum (q - p) ln(q / p)` with proportions
/// floored at 1e-6.
pub fn drift_score(reference: &StageHistogram, current: &StageHistogram) -> Result<f64, TrackingError> {
    if reference.bin_edges != current.bin_edges || reference.counts.len() != current.counts.len() {
        return Err(TrackingError::BinMismatch);
    }
    if reference.total == 0 || current.total == 0 {
        return Err(TrackingError::EmptyHistogram);
    }
    let p = reference.proportions();
    let q = current.proportions();
    Ok(psi(&p, &q))
}

pub(crate) fn psi(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let p = p.max(PSI_FLOOR);
            let q = q.max(PSI_FLOOR);
            (q - p) * (q / p).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn write_events_jsonl(path: &Path, events: &[ExposureEvent]) -> Result<(), TrackingError> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events_jsonl(path: &Path) -> Result<Vec<ExposureEvent>, TrackingError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: ExposureEvent = serde_json::from_str(&line).map_err(|source| TrackingError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        events.push(event);
    }
    Ok(events)
}

/// All `*.events.jsonl` segments in `dir`, in file-name order.
pub fn read_segment_dir(dir: &Path) -> Result<Vec<ExposureEvent>, TrackingError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".events.jsonl"))
        .collect();
    paths.sort();
    let mut events = Vec::new();
    for p in paths {
        events.extend(read_events_jsonl(&p)?);
    }
    Ok(events)
}

/// Events inside `window` from a segment directory written with
/// `window_len`, reading only the segments that overlap it.
pub fn read_segments_in(dir: &Path, window: TimeWindow, window_len: u64) -> Result<Vec<ExposureEvent>, TrackingError> {
    let mut segments: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let id: u64 = p.file_name()?.to_str()?.strip_suffix(".events.jsonl")?.parse().ok()?;
            Some((id, p))
        })
        .filter(|(id, _)| {
            let seg = TimeWindow::new(id.saturating_mul(window_len), (id + 1).saturating_mul(window_len));
            seg.start < window.end && seg.end > window.start
        })
        .collect();
    segments.sort();
    let mut events = Vec::new();
    for (_, p) in segments {
        events.extend(read_events_jsonl(&p)?.into_iter().filter(|e| window.contains(e.timestamp)));
    }
    Ok(events)
}
