//! Loading configs, event logs, decision logs and registries, and the error
//! type that maps failures onto exit codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use blend_core::attribution::{rankings_from_events, Ranking};
use blend_core::model::{BlendDecision, PlanRegistry};
use blend_core::sim::SimConfig;
use blend_core::tracking::{read_events_jsonl, read_segment_dir, ExposureEvent};
use blend_service::{DecisionRecord, ServiceConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation: missing inputs or unparseable flag values.
    #[error("{0}")]
    Usage(String),

    /// Inputs were found but are invalid, or the computation failed.
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        }
    )*};
}

domain_from!(
    blend_core::sim::SimError,
    blend_core::tracking::TrackingError,
    blend_core::attribution::AttributionError,
    blend_service::ServiceError,
    std::io::Error,
    serde_json::Error
);

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn read_json(path: &Path, what: &str) -> Result<Value, CliError> {
    require(path, what)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("invalid {what} {}: {e}", path.display())))
}

/// Parse `value` as `T`, rejecting top-level keys `T` does not have. Config
/// structs fill missing keys with defaults, so a misspelt key would
/// otherwise be silently ignored.
fn strict<T: Serialize + DeserializeOwned + Default>(value: Value, what: &str) -> Result<T, CliError> {
    let known: BTreeSet<String> = match serde_json::to_value(T::default())? {
        Value::Object(m) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    };
    if let Value::Object(m) = &value {
        if let Some(k) = m.keys().find(|k| !known.contains(*k) && *k != "schema_version") {
            return Err(CliError::Domain(format!("invalid {what}: unknown field {k:?}")));
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Domain(format!("invalid {what}: {e}")))
}

/// `simulate` writes `{"schema_version", "config"}`; both that and a bare
/// config are accepted.
fn unwrap_config(value: Value) -> Value {
    match value {
        Value::Object(mut m) if m.contains_key("config") => m.remove("config").unwrap_or(Value::Null),
        v => v,
    }
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig, CliError> {
    let config: SimConfig = strict(unwrap_config(read_json(path, "config")?), "config")?;
    config.validate()?;
    Ok(config)
}

pub fn load_service_config(path: &Path) -> Result<ServiceConfig, CliError> {
    let config: ServiceConfig = strict(read_json(path, "config")?, "config")?;
    config.sim.validate()?;
    Ok(config)
}

/// Directory an input path lives in (the path itself for directories).
fn base_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Events from a JSONL file, a directory holding `events.jsonl`, a service
/// data directory, or a directory of segment files.
pub fn load_events(path: &Path) -> Result<Vec<ExposureEvent>, CliError> {
    require(path, "event log")?;
    let events = if path.is_file() {
        read_events_jsonl(path)?
    } else if path.join("events.jsonl").is_file() {
        read_events_jsonl(&path.join("events.jsonl"))?
    } else if path.join("events").is_dir() {
        read_segment_dir(&path.join("events"))?
    } else {
        read_segment_dir(path)?
    };
    Ok(events)
}

/// Rankings from a decision log of full decisions or of service decision
/// records. Records are completed from `events`.
pub fn load_rankings(path: &Path, events: &[ExposureEvent]) -> Result<Vec<Ranking>, CliError> {
    require(path, "decision log")?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut by_request: BTreeMap<(&str, u64), Vec<ExposureEvent>> = BTreeMap::new();
    let mut grouped = false;
    let mut rankings = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |e: serde_json::Error| CliError::Domain(format!("malformed decision log {}:{}: {e}", path.display(), i + 1));
        let value: Value = serde_json::from_str(&line).map_err(malformed)?;
        if value.get("ranked").is_some() {
            let d: BlendDecision = serde_json::from_value(value).map_err(malformed)?;
            rankings.push(Ranking::from(&d));
            continue;
        }
        let record: DecisionRecord = serde_json::from_value(value).map_err(malformed)?;
        if !grouped {
            for e in events {
                by_request.entry((e.request_id.as_str(), e.timestamp)).or_default().push(e.clone());
            }
            grouped = true;
        }
        let own = by_request
            .get(&(record.request_id.as_str(), record.timestamp))
            .map(Vec::as_slice)
            .unwrap_or_default();
        let d = record.decision(own)?;
        let mut r = Ranking::from(&d);
        r.timestamp = Some(record.timestamp);
        rankings.push(r);
    }
    Ok(rankings)
}

/// A registry from a registry file, a simulation config (bare or as written
/// by `simulate`) or a service config.
pub fn load_registry(path: &Path) -> Result<PlanRegistry, CliError> {
    let value = read_json(path, "registry")?;
    let Value::Object(m) = &value else {
        return Err(CliError::Domain(format!("invalid registry {}: not an object", path.display())));
    };
    if m.contains_key("config") {
        return Ok(strict::<SimConfig>(unwrap_config(value), "config")?.plans);
    }
    if m.contains_key("sim") {
        return Ok(strict::<ServiceConfig>(value, "config")?.sim.plans);
    }
    if m.keys().all(|k| matches!(k.as_str(), "plans" | "version" | "schema_version")) {
        return serde_json::from_value(value).map_err(|e| CliError::Domain(format!("invalid registry {}: {e}", path.display())));
    }
    Ok(strict::<SimConfig>(value, "config")?.plans)
}

pub struct LogPaths {
    pub events: PathBuf,
    pub decisions: Option<PathBuf>,
    pub registry: Option<PathBuf>,
}

pub struct Log {
    pub events: Vec<ExposureEvent>,
    pub rankings: Vec<Ranking>,
    pub registry: Option<PlanRegistry>,
    /// Requests per window, when the log's config records it.
    pub window_len: Option<u64>,
}

impl LogPaths {
    pub fn load(&self) -> Result<Log, CliError> {
        let events = load_events(&self.events)?;
        let rankings = match &self.decisions {
            Some(p) => load_rankings(p, &events)?,
            None => rankings_from_events(&events)?,
        };
        let dir = base_dir(&self.events);
        let registry = match &self.registry {
            Some(p) => Some(load_registry(p)?),
            None => ["registry.json", "config.json"]
                .iter()
                .map(|f| dir.join(f))
                .find(|p| p.is_file())
                .map(|p| load_registry(&p))
                .transpose()?,
        };
        Ok(Log {
            events,
            rankings,
            registry,
            window_len: window_len_near(&dir),
        })
    }
}

/// Window length recorded by `simulate` (`config.json`) or the service
/// (`tracker.json`).
fn window_len_near(dir: &Path) -> Option<u64> {
    let read = |f: &str| -> Option<Value> { serde_json::from_str(&fs::read_to_string(dir.join(f)).ok()?).ok() };
    if let Some(v) = read("tracker.json") {
        if let Some(n) = v.pointer("/config/window_len").or_else(|| v.get("window_len")).and_then(Value::as_u64) {
            return Some(n);
        }
    }
    read("config.json")?.pointer("/config/control_tick").and_then(Value::as_u64)
}
