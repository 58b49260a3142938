use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{bootstrap_alignment, update_alignment, AlignmentConfig, AlignmentParams, AnchorSample};
use crate::control::{ControlTick, DeliveryController};
use crate::model::{BlendDecision, Candidate, PlanRegistry, TimeWindow};
use crate::tracking::ExposureEvent;

use super::config::SimConfig;
use super::outcome::{
    candidate_index, completion_probability, generate_request, generate_with, is_valued_view, outcome_rng,
    sample_outcomes, valued_score, warmup_rng, EFFECTIVE_COMPLETION, PLAY_DURATION,
};
use super::{SimError, SCHEMA_VERSION};

/// Aggregates over exposed items.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: u64,
    pub vv: u64,
    pub valued_vv: u64,
    pub duration: f64,
    pub valued_score: f64,
    /// Sum of the anchor outcome (effective completion) over exposures.
    pub anchor_value: f64,
    pub type_shares: BTreeMap<String, f64>,
    /// Exposure share of each registry plan's selector.
    pub plan_shares: BTreeMap<String, f64>,
    /// Mean of `|sum of boosts| / |final|` over exposed items.
    pub boost_ratio: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub vv: u32,
    pub valued_vv: u32,
    pub duration: f64,
    pub valued_score: f64,
}

/// Per control tick snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickMetrics {
    pub tick: u64,
    pub window: TimeWindow,
    pub exposures: u64,
    pub type_shares: BTreeMap<String, f64>,
    pub plan_shares: BTreeMap<String, f64>,
    pub plan_bias: BTreeMap<String, f64>,
    pub boost_ratio: f64,
    pub valued_score: f64,
    pub mu_score: f64,
    pub mu_anchor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub schema_version: u32,
    pub config: SimConfig,
    pub initial_alignment: Option<AlignmentParams>,
    pub final_alignment: Option<AlignmentParams>,
    pub final_registry: PlanRegistry,
    pub event_log: Vec<ExposureEvent>,
    pub decisions: Vec<BlendDecision>,
    pub controller_trace: Vec<ControlTick>,
    pub ticks: Vec<TickMetrics>,
    pub per_request: Vec<RequestMetrics>,
    pub summary: Summary,
}

#[derive(Default)]
struct Accumulator {
    requests: u64,
    vv: u64,
    valued_vv: u64,
    duration: f64,
    valued_score: f64,
    anchor_value: f64,
    ratio_sum: f64,
    types: BTreeMap<String, u64>,
    plans: BTreeMap<String, u64>,
}

impl Accumulator {
    fn add(&mut self, e: &ExposureEvent, outcomes: &BTreeMap<String, f64>, registry: &PlanRegistry) {
        self.vv += 1;
        if is_valued_view(outcomes) {
            self.valued_vv += 1;
        }
        self.duration += outcomes[PLAY_DURATION];
        self.valued_score += valued_score(outcomes);
        self.anchor_value += outcomes[EFFECTIVE_COMPLETION];
        let d = &e.decomposition;
        if d.final_score != 0.0 {
            self.ratio_sum += (d.final_score - d.aligned).abs() / d.final_score.abs();
        }
        *self.types.entry(e.content_type.as_str().to_string()).or_default() += 1;
        for p in registry.plans() {
            if p.selector.matches(&e.content_type, &e.tags) {
                *self.plans.entry(p.plan_id.clone()).or_default() += 1;
            }
        }
    }

    fn shares(counts: &BTreeMap<String, u64>, total: u64, keys: impl Iterator<Item = String>) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = keys.map(|k| (k, 0.0)).collect();
        if total > 0 {
            for (k, c) in counts {
                out.insert(k.clone(), *c as f64 / total as f64);
            }
        }
        out
    }

    fn summary(&self, config: &SimConfig) -> Summary {
        let type_keys = config.content_mix.keys().map(|c| c.as_str().to_string());
        let plan_keys = config.plans.plans().iter().map(|p| p.plan_id.clone());
        Summary {
            requests: self.requests,
            vv: self.vv,
            valued_vv: self.valued_vv,
            duration: self.duration,
            valued_score: self.valued_score,
            anchor_value: self.anchor_value,
            type_shares: Self::shares(&self.types, self.vv, type_keys),
            plan_shares: Self::shares(&self.plans, self.vv, plan_keys),
            boost_ratio: if self.vv > 0 { self.ratio_sum / self.vv as f64 } else { 0.0 },
        }
    }
}

/// Alignment from plan-free warmup traffic: rank by raw score, expose the
/// top `k`, draw completion at `anchor_base_rate * raw / mean raw`.
pub fn warmup_alignment(config: &SimConfig) -> Result<AlignmentParams, SimError> {
    let c = config.true_scale();
    let mut samples = Vec::new();
    for t in 0..config.warmup_requests {
        let mut rng = warmup_rng(config.seed, t);
        let req = generate_with(config, t, &mut rng);
        let mut cands: Vec<&Candidate> = req.candidates.iter().collect();
        cands.sort_by(|a, b| b.raw_score.total_cmp(&a.raw_score).then_with(|| a.id.cmp(&b.id)));
        for cand in cands.into_iter().take(config.exposures_per_request()) {
            let p = completion_probability(&config.outcome_model, cand.raw_score * c, &cand.content_type);
            let done = if rand::Rng::random::<f64>(&mut rng) < p { 1.0 } else { 0.0 };
            samples.push(AnchorSample::new(cand.raw_score, done));
        }
    }
    let cfg = AlignmentConfig {
        min_bootstrap: 1,
        half_life: config.half_life,
        ..AlignmentConfig::default()
    };
    Ok(bootstrap_alignment(&samples, config.half_life, &cfg)?)
}

/// Closed-loop simulation. A pure function of `config`.
pub fn run(config: &SimConfig) -> Result<SimRun, SimError> {
    config.validate()?;
    let mut acc = Accumulator::default();
    let mut run = SimRun {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        initial_alignment: None,
        final_alignment: None,
        final_registry: config.plans.clone(),
        event_log: Vec::new(),
        decisions: Vec::new(),
        controller_trace: Vec::new(),
        ticks: Vec::new(),
        per_request: Vec::new(),
        summary: Summary::default(),
    };
    if config.n_requests == 0 {
        run.summary = acc.summary(config);
        return Ok(run);
    }

    let align_cfg = AlignmentConfig {
        half_life: config.half_life,
        ..AlignmentConfig::default()
    };
    let mut params = warmup_alignment(config)?;
    run.initial_alignment = Some(params.clone());
    let truth = config.true_scale();
    let mut registry = config.plans.clone();
    let mut controller = DeliveryController::new();
    let mut tick_events: Vec<ExposureEvent> = Vec::new();
    let mut tick_acc = Accumulator::default();
    run.per_request.reserve(config.n_requests as usize);

    for t in 0..config.n_requests {
        let req = generate_request(config, t);
        let decision = config.pipeline.blend(&req, &registry, &params)?;
        let by_id: BTreeMap<&str, &Candidate> = req.candidates.iter().map(|c| (c.id.as_str(), c)).collect();
        let mut rm = RequestMetrics::default();
        for (pos, d) in decision.ranked.iter().enumerate() {
            let exposed = pos < decision.exposed_k;
            if !exposed && !config.log_unexposed {
                continue;
            }
            let cand = by_id[d.candidate_id.as_str()];
            let outcomes = exposed.then(|| {
                let idx = candidate_index(&cand.id).unwrap_or(pos as u64);
                sample_outcomes(
                    &config.outcome_model,
                    cand.raw_score * truth,
                    &cand.content_type,
                    &mut outcome_rng(config.seed, t, idx),
                )
            });
            let event = ExposureEvent {
                request_id: decision.request_id.clone(),
                timestamp: t,
                candidate_id: d.candidate_id.clone(),
                content_type: cand.content_type.clone(),
                tags: cand.tags.clone(),
                decomposition: d.clone(),
                exposed,
                position: Some(pos),
                outcomes,
            };
            if let Some(o) = &event.outcomes {
                acc.add(&event, o, &config.plans);
                tick_acc.add(&event, o, &config.plans);
                rm.vv += 1;
                rm.valued_vv += u32::from(is_valued_view(o));
                rm.duration += o[PLAY_DURATION];
                rm.valued_score += valued_score(o);
                tick_events.push(event.clone());
            }
            if config.retain_events {
                run.event_log.push(event);
            }
        }
        acc.requests += 1;
        tick_acc.requests += 1;
        run.per_request.push(rm);
        if config.retain_decisions {
            run.decisions.push(decision);
        }

        if (t + 1) % config.control_tick == 0 {
            let tick = t / config.control_tick;
            let window = TimeWindow::nth(tick, config.control_tick);
            let (next, trace) = controller.tick(&registry, &tick_events, window)?;
            registry = next;
            run.controller_trace.extend(trace);
            if config.update_alignment {
                let batch: Vec<AnchorSample> = tick_events
                    .iter()
                    .filter_map(|e| {
                        e.outcome(EFFECTIVE_COMPLETION)
                            .map(|o| AnchorSample::new(e.decomposition.raw, o))
                    })
                    .collect();
                params = update_alignment(&params, &batch, &align_cfg);
                params.updated_at = t + 1;
            }
            let s = tick_acc.summary(config);
            run.ticks.push(TickMetrics {
                tick,
                window,
                exposures: s.vv,
                type_shares: s.type_shares,
                plan_shares: s.plan_shares,
                plan_bias: registry.plans().iter().map(|p| (p.plan_id.clone(), p.bias)).collect(),
                boost_ratio: s.boost_ratio,
                valued_score: s.valued_score,
                mu_score: params.mu_score,
                mu_anchor: params.mu_anchor,
            });
            tick_events.clear();
            tick_acc = Accumulator::default();
        }
    }

    run.summary = acc.summary(config);
    run.final_alignment = Some(params);
    run.final_registry = registry;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContentType, Plan, Selector};

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            seed,
            n_requests: 1_000,
            control_tick: 100,
            warmup_requests: 300,
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_run() {
        let c = SimConfig {
            n_requests: 0,
            ..SimConfig::default()
        };
        let r = run(&c).unwrap();
        assert!(r.event_log.is_empty());
        assert_eq!(r.summary.vv, 0);
        assert_eq!(r.summary.valued_score, 0.0);
        assert!(r.summary.type_shares.values().all(|v| *v == 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let c = small(4);
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.summary, run(&small(5)).unwrap().summary);
    }

    #[test]
    fn exposure_conservation() {
        let mut c = small(1);
        c.candidates_per_request = 3;
        let r = run(&c).unwrap();
        assert_eq!(r.summary.vv, c.n_requests * 3);
        let c = small(1);
        let r = run(&c).unwrap();
        assert_eq!(r.summary.vv, c.n_requests * c.k as u64);
        assert_eq!(r.event_log.len() as u64, c.n_requests * c.candidates_per_request as u64);
        assert_eq!(r.per_request.iter().map(|m| m.vv as u64).sum::<u64>(), r.summary.vv);
    }

    #[test]
    fn every_event_is_additive_and_valued_vv_matches_durations() {
        let mut c = small(2);
        c.plans = PlanRegistry::new(vec![
            Plan::pid_plan("ads", Selector::content_type(ContentType::Ad), 0.1),
            Plan::static_plan("fresh", Selector::content_type(ContentType::ColdStart), 0.3, 0.02),
        ])
        .unwrap();
        let r = run(&c).unwrap();
        assert!(r.event_log.iter().all(|e| e.decomposition.is_additive()));
        let valued = r
            .event_log
            .iter()
            .filter(|e| e.outcome(PLAY_DURATION).is_some_and(|d| d > 3.0))
            .count() as u64;
        assert_eq!(valued, r.summary.valued_vv);
        assert_eq!(r.controller_trace.len(), 10);
        assert_eq!(r.ticks.len(), 10);
    }

    #[test]
    fn warmup_aligns_to_base_rate_scale() {
        let c = small(3);
        let p = warmup_alignment(&c).unwrap();
        let ratio = c.anchor_base_rate / c.population_mean_raw();
        assert!((p.ratio() / ratio - 1.0).abs() < 0.1, "{} vs {}", p.ratio(), ratio);
    }

    #[test]
    fn unexposed_logging_can_be_disabled() {
        let mut c = small(6);
        c.log_unexposed = false;
        c.retain_decisions = false;
        let r = run(&c).unwrap();
        assert!(r.event_log.iter().all(|e| e.exposed));
        assert!(r.decisions.is_empty());
        assert_eq!(r.summary, run(&small(6)).unwrap().summary);
    }
}
