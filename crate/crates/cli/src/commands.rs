//! Subcommand bodies. Each writes its JSON artifacts and returns the text
//! to print.

use std::fs;
use std::path::{Path, PathBuf};

use blend_core::attribution::{
    calibration_curve, counterfactual_replay, plan_reports, rank_anchor_candidates, roi, write_curve_csv,
    write_reports_csv,
};
use blend_core::model::{PlanRegistry, TimeWindow};
use blend_core::sim::{self, ab_compare, write_json, write_run, SimConfig, Summary, METRICS, SCHEMA_VERSION};
use serde_json::json;

use crate::inputs::{load_events, load_service_config, load_sim_config, CliError, LogPaths};
use crate::table::{num, opt, Table};

const DEFAULT_WINDOW_LEN: u64 = 500;

fn with_overrides(mut config: SimConfig, seed: Option<u64>, steps: Option<u64>) -> Result<SimConfig, CliError> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(n) = steps {
        config.n_requests = n;
    }
    config.validate()?;
    Ok(config)
}

fn summary_rows(t: &mut Table, s: &Summary) {
    t.row(["requests".to_string(), s.requests.to_string()]);
    t.row(["vv".to_string(), s.vv.to_string()]);
    t.row(["valued_vv".to_string(), s.valued_vv.to_string()]);
    t.row(["duration".to_string(), num(s.duration)]);
    t.row(["valued_score".to_string(), num(s.valued_score)]);
    t.row(["anchor_value".to_string(), num(s.anchor_value)]);
    t.row(["boost_ratio".to_string(), num(s.boost_ratio)]);
    for (ct, v) in &s.type_shares {
        t.row([format!("type_share:{ct}"), num(*v)]);
    }
    for (id, v) in &s.plan_shares {
        t.row([format!("plan_share:{id}"), num(*v)]);
    }
}

pub fn simulate(config: &Path, seed: Option<u64>, steps: Option<u64>, out: &Path) -> Result<String, CliError> {
    let config = with_overrides(load_sim_config(config)?, seed, steps)?;
    let run = sim::run(&config)?;
    write_run(&run, out)?;
    let mut t = Table::new(["metric", "value"]);
    summary_rows(&mut t, &run.summary);
    Ok(t.render())
}

pub fn ab(
    config_a: &Path,
    config_b: &Path,
    seed: Option<u64>,
    steps: Option<u64>,
    out: &Path,
) -> Result<String, CliError> {
    let a = with_overrides(load_sim_config(config_a)?, seed, steps)?;
    let b = with_overrides(load_sim_config(config_b)?, seed, steps)?;
    let report = ab_compare(&a, &b)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("ab.json"), &report)?;

    let (sa, sb) = (&report.a, &report.b);
    let mut t = Table::new(["metric", "a", "b", "relative"]);
    let counts = [("vv", sa.vv, sb.vv), ("valued_vv", sa.valued_vv, sb.valued_vv)];
    for (m, x, y) in counts {
        t.row([m.to_string(), x.to_string(), y.to_string(), opt(report.relative[m])]);
    }
    let reals = [
        ("duration", sa.duration, sb.duration),
        ("valued_score", sa.valued_score, sb.valued_score),
        ("anchor_value", sa.anchor_value, sb.anchor_value),
        ("boost_ratio", sa.boost_ratio, sb.boost_ratio),
    ];
    for (m, x, y) in reals {
        t.row([m.to_string(), num(x), num(y), opt(report.relative[m])]);
    }
    let mut shares = Table::new(["content_type", "a", "b", "delta"]);
    for (ct, d) in &report.share_deltas {
        let get = |s: &Summary| s.type_shares.get(ct).copied().unwrap_or(0.0);
        shares.row([ct.clone(), num(get(sa)), num(get(sb)), num(*d)]);
    }
    let mut paired = Table::new(["statistic", "value"]);
    paired.row(["boost_ratio_reduction".to_string(), opt(report.boost_ratio_reduction)]);
    paired.row(["paired_requests".to_string(), report.paired.requests.to_string()]);
    paired.row(["mean_valued_score_delta".to_string(), num(report.paired.mean_valued_score_delta)]);
    paired.row(["stderr".to_string(), num(report.paired.stderr)]);
    Ok(format!("{}\n{}\n{}", t.render(), shares.render(), paired.render()))
}

pub fn replay(paths: &LogPaths, plan: &str, out: &Path) -> Result<String, CliError> {
    let log = paths.load()?;
    let registry = log.registry.unwrap_or_else(PlanRegistry::default);
    let outcome = counterfactual_replay(&log.rankings, plan, &registry)?;
    let roi_vv = roi(outcome.vv_lift, outcome.cost);
    fs::create_dir_all(out)?;
    write_json(
        &out.join("replay.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "plan_id": plan,
            "requests": log.rankings.len(),
            "vv_lift": outcome.vv_lift,
            "cost": outcome.cost,
            "roi_vv": roi_vv,
        }),
    )?;
    let mut t = Table::new(["plan_id", "requests", "vv_lift", "cost", "roi"]);
    t.row([
        plan.to_string(),
        log.rankings.len().to_string(),
        outcome.vv_lift.to_string(),
        num(outcome.cost),
        opt(roi_vv),
    ]);
    Ok(t.render())
}

pub fn report(paths: &LogPaths, window: &str, window_len: Option<u64>, out: &Path) -> Result<String, CliError> {
    let log = paths.load()?;
    let registry = log
        .registry
        .ok_or_else(|| CliError::Usage("no plan registry found next to the event log; pass --registry".into()))?;
    let window = if window == "all" {
        let lo = log.events.iter().map(|e| e.timestamp).min();
        let hi = log.events.iter().map(|e| e.timestamp).max();
        match (lo, hi) {
            (Some(lo), Some(hi)) => TimeWindow::new(lo, hi + 1),
            _ => return Err(CliError::Domain("event log is empty".into())),
        }
    } else {
        let len = window_len.or(log.window_len).unwrap_or(DEFAULT_WINDOW_LEN);
        blend_service::api::parse_window(window, len).map_err(|e| CliError::Usage(e.to_string()))?
    };
    let reports = plan_reports(&log.events, &log.rankings, &registry, window)?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("report.json"),
        &json!({ "schema_version": SCHEMA_VERSION, "window": window, "reports": reports }),
    )?;
    write_reports_csv(fs::File::create(out.join("report.csv"))?, &reports)?;
    let mut t = Table::new(["plan_id", "exposure_share", "boost_spend", "cost", "vv_lift", "roi"]);
    for r in &reports {
        t.row([
            r.plan_id.clone(),
            num(r.exposure_share),
            num(r.boost_spend),
            num(r.cost),
            r.vv_lift.to_string(),
            opt(r.roi_vv),
        ]);
    }
    Ok(format!("window {}-{}\n{}", window.start, window.end, t.render()))
}

pub fn anchor(events: &Path, metrics: &[String], bins: usize, out: &Path) -> Result<String, CliError> {
    let events = load_events(events)?;
    let metrics: Vec<String> = if metrics.is_empty() {
        METRICS.iter().map(|m| m.to_string()).collect()
    } else {
        metrics.to_vec()
    };
    let curves = metrics
        .iter()
        .map(|m| calibration_curve(&events, m, bins))
        .collect::<Result<Vec<_>, _>>()?;
    let ranked = rank_anchor_candidates(curves);
    fs::create_dir_all(out)?;
    let mut csvs: Vec<PathBuf> = Vec::new();
    for c in &ranked {
        let p = out.join(format!("calibration_{}.csv", c.metric));
        write_curve_csv(fs::File::create(&p)?, c)?;
        csvs.push(p);
    }
    write_json(
        &out.join("anchor.json"),
        &json!({ "schema_version": SCHEMA_VERSION, "bins": bins, "ranking": ranked }),
    )?;
    let mut t = Table::new(["rank", "metric", "stability", "scale"]);
    for (i, c) in ranked.iter().enumerate() {
        t.row([(i + 1).to_string(), c.metric.clone(), num(c.stability), num(c.scale)]);
    }
    Ok(t.render())
}

pub fn serve(config: Option<&Path>, port: Option<u16>, data_dir: Option<PathBuf>) -> Result<String, CliError> {
    let mut config = match config {
        Some(p) => load_service_config(p)?,
        None => blend_service::ServiceConfig::default(),
    };
    if let Some(p) = port {
        config.port = p;
    }
    if data_dir.is_some() {
        config.data_dir = data_dir;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(blend_service::serve(config))?;
    Ok(String::new())
}
