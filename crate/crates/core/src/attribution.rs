//! Per-plan cost, lift and ROI by single-plan counterfactual replay, and
//! calibration analysis for choosing the anchor metric.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::measure_exposure_share;
use crate::model::{compare_decompositions, rank_order, BlendDecision, PlanRegistry, ScoreDecomposition, TimeWindow, Timestamp};
use crate::tracking::ExposureEvent;

pub const DEFAULT_CALIBRATION_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("request {0} has no complete decomposition in the log")]
    MissingDecomposition(String),

    #[error("unknown plan {0:?}")]
    UnknownPlan(String),

    #[error("need at least {need} exposed events with metric {metric:?}, got {got}")]
    InsufficientData { metric: String, need: usize, got: usize },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The part of a decision that replay needs: the full ranked list and how
/// many slots were shown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<Timestamp>,
    pub ranked: Vec<ScoreDecomposition>,
    pub exposed_k: usize,
}

impl From<&BlendDecision> for Ranking {
    fn from(d: &BlendDecision) -> Self {
        Self {
            request_id: d.request_id.clone(),
            timestamp: None,
            ranked: d.ranked.clone(),
            exposed_k: d.exposed_k.min(d.ranked.len()),
        }
    }
}

/// Rebuild rankings from a log, one per (request id, timestamp). Each request
/// must have contiguous positions starting at 0 and its exposed items must be
/// a prefix.
pub fn rankings_from_events(events: &[ExposureEvent]) -> Result<Vec<Ranking>, AttributionError> {
    let mut order: Vec<(&str, u64)> = Vec::new();
    let mut groups: BTreeMap<(&str, u64), Vec<&ExposureEvent>> = BTreeMap::new();
    for e in events {
        let key = (e.request_id.as_str(), e.timestamp);
        let g = groups.entry(key).or_default();
        if g.is_empty() {
            order.push(key);
        }
        g.push(e);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let req = key.0;
        let mut g = groups.remove(&key).unwrap_or_default();
        let missing = || AttributionError::MissingDecomposition(req.to_string());
        if g.iter().any(|e| e.position.is_none()) {
            return Err(missing());
        }
        g.sort_by_key(|e| e.position);
        if g.iter().enumerate().any(|(i, e)| e.position != Some(i)) {
            return Err(missing());
        }
        let exposed_k = g.iter().take_while(|e| e.exposed).count();
        if g[exposed_k..].iter().any(|e| e.exposed) {
            return Err(missing());
        }
        out.push(Ranking {
            request_id: req.to_string(),
            timestamp: g.iter().map(|e| e.timestamp).min(),
            ranked: g.iter().map(|e| e.decomposition.clone()).collect(),
            exposed_k,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub vv_lift: i64,
    pub cost: f64,
}

/// Per-request contribution before the overall cost floor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RequestReplay {
    pub vv_lift: i64,
    pub displaced_in: f64,
    pub member_value_out: f64,
}

/// Re-rank one request with `plan_id`'s term left out of every final score.
pub fn replay_request(ranking: &Ranking, plan_id: &str) -> RequestReplay {
    let k = ranking.exposed_k.min(ranking.ranked.len());
    let mut cf: Vec<(f64, &ScoreDecomposition)> = ranking
        .ranked
        .iter()
        .map(|d| (d.final_without(plan_id), d))
        .collect();
    cf.sort_by(|a, b| rank_order(a.0, &a.1.candidate_id, b.0, &b.1.candidate_id));

    let actual: BTreeSet<&str> = ranking.ranked[..k].iter().map(|d| d.candidate_id.as_str()).collect();
    let counter: BTreeSet<&str> = cf[..k].iter().map(|(_, d)| d.candidate_id.as_str()).collect();

    let mut r = RequestReplay::default();
    for d in &ranking.ranked[..k] {
        if d.is_member(plan_id) {
            r.vv_lift += 1;
            if !counter.contains(d.candidate_id.as_str()) {
                r.member_value_out += d.aligned;
            }
        }
    }
    for (_, d) in &cf[..k] {
        if d.is_member(plan_id) {
            r.vv_lift -= 1;
        }
        if !actual.contains(d.candidate_id.as_str()) {
            r.displaced_in += d.aligned;
        }
    }
    r
}

/// Net member exposures gained by `plan_id` and the anchor value it
/// displaced, over all rankings.
pub fn counterfactual_replay(
    rankings: &[Ranking],
    plan_id: &str,
    registry: &PlanRegistry,
) -> Result<ReplayOutcome, AttributionError> {
    if !registry.contains(plan_id) && !rankings.iter().any(|r| r.ranked.iter().any(|d| d.is_member(plan_id))) {
        return Err(AttributionError::UnknownPlan(plan_id.to_string()));
    }
    let mut lift = 0i64;
    let mut displaced = 0.0;
    let mut member_out = 0.0;
    for r in rankings {
        debug_assert!(r.ranked.windows(2).all(|w| compare_decompositions(&w[0], &w[1]) != Ordering::Greater));
        let rr = replay_request(r, plan_id);
        lift += rr.vv_lift;
        displaced += rr.displaced_in;
        member_out += rr.member_value_out;
    }
    Ok(ReplayOutcome {
        vv_lift: lift,
        cost: (displaced - member_out).max(0.0),
    })
}

/// Lift per unit of displaced anchor value; `None` when nothing was displaced.
pub fn roi(vv_lift: i64, cost: f64) -> Option<f64> {
    (cost > 0.0).then(|| vv_lift as f64 / cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub plan_id: String,
    pub window: TimeWindow,
    pub cost: f64,
    pub vv_lift: i64,
    pub boost_spend: f64,
    pub exposure_share: f64,
    pub roi_vv: Option<f64>,
}

/// One report per enabled plan over the rankings whose requests fall in
/// `window`.
pub fn plan_reports(
    events: &[ExposureEvent],
    rankings: &[Ranking],
    registry: &PlanRegistry,
    window: TimeWindow,
) -> Result<Vec<PlanReport>, AttributionError> {
    let in_window: Vec<&ExposureEvent> = events.iter().filter(|e| window.contains(e.timestamp)).collect();
    let requests: BTreeSet<&str> = in_window.iter().map(|e| e.request_id.as_str()).collect();
    let selected: Vec<Ranking> = rankings
        .iter()
        .filter(|r| match r.timestamp {
            Some(ts) => window.contains(ts),
            None => requests.contains(r.request_id.as_str()),
        })
        .cloned()
        .collect();
    let window_events: Vec<ExposureEvent> = in_window.into_iter().cloned().collect();

    let mut reports = Vec::new();
    for plan in registry.enabled() {
        let replay = counterfactual_replay(&selected, &plan.plan_id, registry)?;
        let boost_spend = window_events
            .iter()
            .filter(|e| e.exposed)
            .filter_map(|e| e.decomposition.plan_boosts.get(&plan.plan_id))
            .sum();
        let exposure_share = measure_exposure_share(&window_events, plan, window)
            .ok()
            .and_then(|m| m.share)
            .unwrap_or(0.0);
        reports.push(PlanReport {
            plan_id: plan.plan_id.clone(),
            window,
            cost: replay.cost,
            vv_lift: replay.vv_lift,
            boost_spend,
            exposure_share,
            roi_vv: roi(replay.vv_lift, replay.cost),
        });
    }
    Ok(reports)
}

/// Plan with the lowest ROI. Plans without a defined ROI are skipped.
pub fn lowest_roi(reports: &[PlanReport]) -> Option<&PlanReport> {
    reports
        .iter()
        .filter(|r| r.roi_vv.is_some())
        .min_by(|a, b| {
            a.roi_vv
                .unwrap()
                .total_cmp(&b.roi_vv.unwrap())
                .then_with(|| a.plan_id.cmp(&b.plan_id))
        })
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[PlanReport]) -> Result<(), AttributionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "plan_id",
        "window_start",
        "window_end",
        "exposure_share",
        "boost_spend",
        "cost",
        "vv_lift",
        "roi_vv",
    ])?;
    for r in reports {
        w.write_record([
            r.plan_id.clone(),
            r.window.start.to_string(),
            r.window.end.to_string(),
            r.exposure_share.to_string(),
            r.boost_spend.to_string(),
            r.cost.to_string(),
            r.vv_lift.to_string(),
            r.roi_vv.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub score_lo: f64,
    pub score_hi: f64,
    pub mean_score: f64,
    pub mean_outcome: f64,
    pub n: usize,
}

/// Outcome rate against aligned score in equal-frequency bins.
///
/// Metrics live in different units, so each curve is compared against the
/// line through the origin with slope `scale = mean outcome / mean score`.
/// For the anchor metric that slope is 1 by construction of the alignment.
/// `stability` is the spread of per-bin errors relative to the mean outcome,
/// which makes curves for different metrics comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub metric: String,
    pub bins: Vec<CalibrationBin>,
    pub calibration_errors: Vec<f64>,
    pub stability: f64,
    pub scale: f64,
}

impl CalibrationCurve {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.n).sum()
    }
}

pub fn calibration_curve(
    events: &[ExposureEvent],
    metric: &str,
    n_bins: usize,
) -> Result<CalibrationCurve, AttributionError> {
    let mut points: Vec<(f64, f64)> = events
        .iter()
        .filter(|e| e.exposed)
        .filter_map(|e| e.outcome(metric).map(|o| (e.decomposition.aligned, o)))
        .collect();
    let n_bins = n_bins.max(1);
    if points.len() < n_bins {
        return Err(AttributionError::InsufficientData {
            metric: metric.to_string(),
            need: n_bins,
            got: points.len(),
        });
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = points.len();
    let mean_score = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mean_outcome = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let scale = if mean_score > 0.0 { mean_outcome / mean_score } else { 1.0 };

    // equal-frequency cuts, nudged forward so tied scores share a bin
    let mut cuts = vec![0usize];
    for i in 1..n_bins {
        let mut c = i * n / n_bins;
        let last = *cuts.last().unwrap();
        c = c.max(last);
        while c > 0 && c < n && points[c].0 == points[c - 1].0 {
            c += 1;
        }
        if c > last && c < n {
            cuts.push(c);
        }
    }
    cuts.push(n);

    let mut bins = Vec::with_capacity(cuts.len() - 1);
    let mut errors = Vec::with_capacity(cuts.len() - 1);
    for w in cuts.windows(2) {
        let slice = &points[w[0]..w[1]];
        let m = slice.len() as f64;
        let ms = slice.iter().map(|p| p.0).sum::<f64>() / m;
        let mo = slice.iter().map(|p| p.1).sum::<f64>() / m;
        errors.push((mo - scale * ms).abs());
        bins.push(CalibrationBin {
            score_lo: slice[0].0,
            score_hi: slice[slice.len() - 1].0,
            mean_score: ms,
            mean_outcome: mo,
            n: slice.len(),
        });
    }
    let stability = if mean_outcome.abs() > 0.0 {
        std_dev(&errors) / mean_outcome.abs()
    } else {
        f64::INFINITY
    };
    Ok(CalibrationCurve {
        metric: metric.to_string(),
        bins,
        calibration_errors: errors,
        stability,
        scale,
    })
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Most stable curve first; ties by metric name.
pub fn rank_anchor_candidates(mut curves: Vec<CalibrationCurve>) -> Vec<CalibrationCurve> {
    curves.sort_by(|a, b| a.stability.total_cmp(&b.stability).then_with(|| a.metric.cmp(&b.metric)));
    curves
}

pub fn write_curve_csv<W: Write>(out: W, curve: &CalibrationCurve) -> Result<(), AttributionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "bin", "score_lo", "score_hi", "mean_score", "mean_outcome", "n", "calibration_error"])?;
    for (i, (b, e)) in curve.bins.iter().zip(&curve.calibration_errors).enumerate() {
        w.write_record([
            curve.metric.clone(),
            i.to_string(),
            b.score_lo.to_string(),
            b.score_hi.to_string(),
            b.mean_score.to_string(),
            b.mean_outcome.to_string(),
            b.n.to_string(),
            e.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
