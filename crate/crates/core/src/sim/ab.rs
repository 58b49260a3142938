//! Paired A/B comparison and exposure-matched legacy baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blender::Pipeline;
use crate::model::{PlanMode, PlanRegistry};

use super::config::SimConfig;
use super::runner::{run, SimRun, Summary};
use super::{SimError, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub requests: u64,
    /// Mean over requests of `valued_score(b) - valued_score(a)`.
    pub mean_valued_score_delta: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n_requests: u64,
    pub k: usize,
    pub a: Summary,
    pub b: Summary,
    /// `(b - a) / |a|` per metric; absent when `a` is zero and `b` is not.
    pub relative: BTreeMap<String, Option<f64>>,
    /// `b - a` for each content-type share.
    pub share_deltas: BTreeMap<String, f64>,
    /// `1 - ratio(b) / ratio(a)` for the mean boost-to-final ratio.
    pub boost_ratio_reduction: Option<f64>,
    pub paired: PairedDelta,
}

fn relative(a: f64, b: f64) -> Option<f64> {
    if a == b {
        Some(0.0)
    } else if a == 0.0 {
        None
    } else {
        Some((b - a) / a.abs())
    }
}

fn check_pair(a: &SimConfig, b: &SimConfig) -> Result<(), SimError> {
    let mut diffs = Vec::new();
    if a.seed != b.seed {
        diffs.push(format!("seed {} vs {}", a.seed, b.seed));
    }
    if a.n_requests != b.n_requests {
        diffs.push(format!("n_requests {} vs {}", a.n_requests, b.n_requests));
    }
    if a.k != b.k {
        diffs.push(format!("k {} vs {}", a.k, b.k));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(SimError::ConfigMismatch(diffs.join(", ")))
    }
}

/// Run both arms (in parallel) and compare them request by request.
pub fn ab_compare(a: &SimConfig, b: &SimConfig) -> Result<AbReport, SimError> {
    check_pair(a, b)?;
    let (ra, rb) = std::thread::scope(|s| {
        let ha = s.spawn(|| run(a));
        let rb = run(b);
        (ha.join().expect("arm a panicked"), rb)
    });
    compare_runs(&ra?, &rb?)
}

pub fn compare_runs(a: &SimRun, b: &SimRun) -> Result<AbReport, SimError> {
    check_pair(&a.config, &b.config)?;
    let (sa, sb) = (&a.summary, &b.summary);
    let mut rel = BTreeMap::new();
    rel.insert("vv".to_string(), relative(sa.vv as f64, sb.vv as f64));
    rel.insert("valued_vv".to_string(), relative(sa.valued_vv as f64, sb.valued_vv as f64));
    rel.insert("duration".to_string(), relative(sa.duration, sb.duration));
    rel.insert("valued_score".to_string(), relative(sa.valued_score, sb.valued_score));
    rel.insert("anchor_value".to_string(), relative(sa.anchor_value, sb.anchor_value));
    rel.insert("boost_ratio".to_string(), relative(sa.boost_ratio, sb.boost_ratio));

    let mut shares = BTreeMap::new();
    for key in sa.type_shares.keys().chain(sb.type_shares.keys()) {
        let va = sa.type_shares.get(key).copied().unwrap_or(0.0);
        let vb = sb.type_shares.get(key).copied().unwrap_or(0.0);
        shares.insert(key.clone(), vb - va);
    }

    let diffs: Vec<f64> = a
        .per_request
        .iter()
        .zip(&b.per_request)
        .map(|(x, y)| y.valued_score - x.valued_score)
        .collect();
    let n = diffs.len() as f64;
    let (mean, stderr) = if diffs.is_empty() {
        (0.0, 0.0)
    } else {
        let m = diffs.iter().sum::<f64>() / n;
        let var = if diffs.len() > 1 {
            diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (m, (var / n).sqrt())
    };

    Ok(AbReport {
        schema_version: SCHEMA_VERSION,
        seed: a.config.seed,
        n_requests: a.config.n_requests,
        k: a.config.k,
        a: sa.clone(),
        b: sb.clone(),
        relative: rel,
        share_deltas: shares,
        boost_ratio_reduction: (sa.boost_ratio > 0.0).then(|| 1.0 - sb.boost_ratio / sa.boost_ratio),
        paired: PairedDelta {
            requests: diffs.len() as u64,
            mean_valued_score_delta: mean,
            stderr,
        },
    })
}

/// The same traffic served by the legacy pipeline, with every delivered
/// plan turned into a static multiplicative plan of the given weight.
pub fn legacy_counterpart(config: &SimConfig, weights: &BTreeMap<String, f64>) -> Result<SimConfig, SimError> {
    let plans = config
        .plans
        .plans()
        .iter()
        .cloned()
        .map(|mut p| {
            if p.mode == PlanMode::PidDelivered {
                p.mode = crate::model::PlanMode::Static;
                p.weight = weights.get(&p.plan_id).copied().unwrap_or(0.0);
                p.bias = 0.0;
                p.target_share = None;
                p.controller = None;
            }
            p
        })
        .collect();
    let registry = PlanRegistry::new(plans).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(SimConfig {
        pipeline: Pipeline::Legacy,
        plans: registry,
        ..config.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegacyMatch {
    pub plan_id: String,
    pub target: f64,
    pub weight: f64,
    pub achieved_share: f64,
    pub runs: u32,
    pub config: SimConfig,
}

fn lean(config: &SimConfig) -> SimConfig {
    SimConfig {
        log_unexposed: false,
        retain_events: false,
        retain_decisions: false,
        ..config.clone()
    }
}

/// Bisect the legacy weight of the single delivered plan in `config` until
/// the legacy run's exposure share for it is within `tolerance` of the
/// plan's target.
pub fn match_legacy_exposure(config: &SimConfig, tolerance: f64) -> Result<LegacyMatch, SimError> {
    let delivered: Vec<_> = config
        .plans
        .enabled()
        .filter(|p| p.mode == PlanMode::PidDelivered)
        .collect();
    let plan = match delivered.as_slice() {
        [p] => *p,
        _ => {
            return Err(SimError::InvalidConfig(format!(
                "exactly one delivered plan required, found {}",
                delivered.len()
            )))
        }
    };
    let target = plan.target_share.unwrap_or(0.0);
    let id = plan.plan_id.clone();
    let mut runs = 0u32;
    let mut share_at = |w: f64| -> Result<f64, SimError> {
        runs += 1;
        let cfg = legacy_counterpart(&lean(config), &BTreeMap::from([(id.clone(), w)]))?;
        Ok(run(&cfg)?.summary.plan_shares.get(&id).copied().unwrap_or(0.0))
    };

    let mut lo = 0.0;
    let mut s_lo = share_at(lo)?;
    let mut best = (lo, s_lo);
    if (s_lo - target).abs() <= tolerance || s_lo > target {
        let weights = BTreeMap::from([(id.clone(), lo)]);
        return Ok(LegacyMatch {
            plan_id: id.clone(),
            target,
            weight: lo,
            achieved_share: s_lo,
            runs,
            config: legacy_counterpart(config, &weights)?,
        });
    }
    let mut hi = 1.0;
    let mut s_hi = share_at(hi)?;
    while s_hi < target {
        lo = hi;
        s_lo = s_hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(SimError::NoMatch(format!("share {s_hi} at weight {lo} below target {target}")));
        }
        s_hi = share_at(hi)?;
    }
    for (w, s) in [(lo, s_lo), (hi, s_hi)] {
        if (s - target).abs() < (best.1 - target).abs() {
            best = (w, s);
        }
    }
    let mut iter = 0;
    while (best.1 - target).abs() > tolerance && iter < 40 {
        let mid = 0.5 * (lo + hi);
        let s = share_at(mid)?;
        if (s - target).abs() < (best.1 - target).abs() {
            best = (mid, s);
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
        iter += 1;
    }
    if (best.1 - target).abs() > tolerance {
        return Err(SimError::NoMatch(format!(
            "closest share {} at weight {} for target {target}",
            best.1, best.0
        )));
    }
    let weights = BTreeMap::from([(id.clone(), best.0)]);
    Ok(LegacyMatch {
        plan_id: id,
        target,
        weight: best.0,
        achieved_share: best.1,
        runs,
        config: legacy_counterpart(config, &weights)?,
    })
}
