//! Deterministic synthetic traffic: candidate generation, outcome models and
//! the closed serving/control loop.

pub mod ab;
pub mod config;
pub mod outcome;
pub mod runner;
pub mod scenarios;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub use ab::{ab_compare, compare_runs, legacy_counterpart, match_legacy_exposure, AbReport, LegacyMatch};
pub use config::{Logistic, OutcomeModel, ScoreModel, SimConfig, TagSpec};
pub use outcome::{generate_request, sample_outcomes, METRICS};
pub use runner::{run, RequestMetrics, SimRun, Summary, TickMetrics};

/// Version stamp written into every exported JSON document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("configs cannot be compared: {0}")]
    ConfigMismatch(String),

    #[error("could not match exposure: {0}")]
    NoMatch(String),

    #[error(transparent)]
    Alignment(#[from] crate::alignment::AlignmentError),

    #[error(transparent)]
    Blend(#[from] crate::blender::BlendError),

    #[error(transparent)]
    Control(#[from] crate::control::ControlError),

    #[error(transparent)]
    Tracking(#[from] crate::tracking::TrackingError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    schema_version: u32,
    seed: u64,
    n_requests: u64,
    pipeline: crate::blender::Pipeline,
    summary: &'a Summary,
    initial_alignment: &'a Option<crate::alignment::AlignmentParams>,
    final_alignment: &'a Option<crate::alignment::AlignmentParams>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Export a run as `events.jsonl`, `decisions.jsonl`, `summary.json`,
/// `controller_trace.json`, `ticks.json` and `config.json` under `dir`.
pub fn write_run(run: &SimRun, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    crate::tracking::write_events_jsonl(&dir.join("events.jsonl"), &run.event_log)?;
    let mut out = BufWriter::new(File::create(dir.join("decisions.jsonl"))?);
    for d in &run.decisions {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    write_json(
        &dir.join("summary.json"),
        &SummaryDoc {
            schema_version: SCHEMA_VERSION,
            seed: run.config.seed,
            n_requests: run.config.n_requests,
            pipeline: run.config.pipeline,
            summary: &run.summary,
            initial_alignment: &run.initial_alignment,
            final_alignment: &run.final_alignment,
        },
    )?;
    write_json(
        &dir.join("controller_trace.json"),
        &serde_json::json!({ "schema_version": SCHEMA_VERSION, "trace": run.controller_trace }),
    )?;
    write_json(
        &dir.join("ticks.json"),
        &serde_json::json!({ "schema_version": SCHEMA_VERSION, "ticks": run.ticks }),
    )?;
    write_json(
        &dir.join("config.json"),
        &serde_json::json!({ "schema_version": SCHEMA_VERSION, "config": run.config }),
    )?;
    Ok(())
}
