use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blender::Pipeline;
use crate::model::{ContentType, PlanRegistry};
use crate::tracking::DEFAULT_WINDOW_LEN;

use super::SimError;

/// Log-normal raw score: `exp(N(mu, sigma))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub mu: f64,
    pub sigma: f64,
}

impl ScoreModel {
    pub fn new(mu: f64, sigma: f64) -> Self {
        Self { mu, sigma }
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }
}

/// A tag attached independently with probability `prob` to candidates of
/// `content_type` (any type when unset). Tagged candidates have their raw
/// score multiplied by `score_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSpec {
    pub tag: String,
    #[serde(default)]
    pub content_type: Option<ContentType>,
    pub prob: f64,
    #[serde(default = "one")]
    pub score_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// `P(y = 1) = 1 / (1 + exp(-(intercept + slope * aligned)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub intercept: f64,
    pub slope: f64,
}

impl Logistic {
    pub fn new(intercept: f64, slope: f64) -> Self {
        Self { intercept, slope }
    }

    pub fn prob(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-(self.intercept + self.slope * x)).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeModel {
    /// Completion probability is `clamp(aligned, 0, 1)^exponent`; 1 is a
    /// perfectly calibrated model.
    pub completion_exponent: f64,
    /// Ads complete this much less often than organic items at equal score.
    pub ad_gap: f64,
    /// Mean play duration in seconds for completed and skipped items.
    pub duration_completed: f64,
    pub duration_skipped: f64,
    pub click: Logistic,
    pub interaction: Logistic,
    pub slide: Logistic,
    pub buy_rate: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            completion_exponent: 1.0,
            ad_gap: 0.05,
            duration_completed: 20.0,
            duration_skipped: 1.0,
            click: Logistic::new(-2.2, 3.0),
            interaction: Logistic::new(-6.0, 3.0),
            slide: Logistic::new(-0.5, -2.0),
            buy_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_requests: u64,
    pub candidates_per_request: usize,
    pub k: usize,
    pub content_mix: BTreeMap<ContentType, f64>,
    pub score_model: BTreeMap<ContentType, ScoreModel>,
    pub tags: Vec<TagSpec>,
    pub outcome_model: OutcomeModel,
    pub plans: PlanRegistry,
    pub pipeline: Pipeline,
    /// Requests per control tick and tracking window.
    pub control_tick: u64,
    /// Plan-free requests used to bootstrap alignment before the run.
    pub warmup_requests: u64,
    /// Population-average completion rate the warmup outcomes are drawn at.
    pub anchor_base_rate: f64,
    pub half_life: f64,
    /// Fold each tick's exposures into the alignment parameters.
    pub update_alignment: bool,
    /// Log ranked-but-unexposed candidates too, so decisions can be rebuilt
    /// from the event log alone.
    pub log_unexposed: bool,
    pub retain_events: bool,
    pub retain_decisions: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_requests: 10_000,
            candidates_per_request: 20,
            k: 5,
            content_mix: BTreeMap::from([
                (ContentType::Organic, 0.8),
                (ContentType::Ad, 0.15),
                (ContentType::ColdStart, 0.05),
            ]),
            score_model: BTreeMap::from([
                (ContentType::Organic, ScoreModel::new(0.0, 0.5)),
                (ContentType::Ad, ScoreModel::new(-1.0, 1.0)),
                (ContentType::ColdStart, ScoreModel::new(-0.5, 0.5)),
            ]),
            tags: Vec::new(),
            outcome_model: OutcomeModel::default(),
            plans: PlanRegistry::default(),
            pipeline: Pipeline::Independent,
            control_tick: DEFAULT_WINDOW_LEN,
            warmup_requests: 2_000,
            anchor_base_rate: 0.15,
            half_life: crate::alignment::DEFAULT_HALF_LIFE,
            update_alignment: true,
            log_unexposed: true,
            retain_events: true,
            retain_decisions: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.candidates_per_request == 0 {
            return bad("candidates_per_request must be at least 1".into());
        }
        if self.control_tick == 0 {
            return bad("control_tick must be at least 1".into());
        }
        if self.content_mix.is_empty() {
            return bad("content_mix is empty".into());
        }
        let mut total = 0.0;
        for (ct, p) in &self.content_mix {
            if !(p.is_finite() && *p >= 0.0) {
                return bad(format!("content_mix[{ct}] = {p}"));
            }
            if *p > 0.0 && !self.score_model.contains_key(ct) {
                return bad(format!("no score model for {ct}"));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("content_mix sums to {total}"));
        }
        for (ct, m) in &self.score_model {
            if !(m.mu.is_finite() && m.sigma.is_finite() && m.sigma >= 0.0) {
                return bad(format!("score_model[{ct}] invalid"));
            }
        }
        for t in &self.tags {
            if !(0.0..=1.0).contains(&t.prob) || !(t.score_scale.is_finite() && t.score_scale >= 0.0) {
                return bad(format!("tag {} invalid", t.tag));
            }
        }
        let o = &self.outcome_model;
        if !(o.completion_exponent > 0.0 && o.completion_exponent.is_finite()) {
            return bad("completion_exponent must be positive".into());
        }
        if !(0.0..=1.0).contains(&o.ad_gap) || !(0.0..=1.0).contains(&o.buy_rate) {
            return bad("ad_gap and buy_rate must lie in [0, 1]".into());
        }
        if !(o.duration_completed > 0.0 && o.duration_skipped > 0.0) {
            return bad("duration means must be positive".into());
        }
        if !(self.anchor_base_rate > 0.0 && self.anchor_base_rate <= 1.0) {
            return bad("anchor_base_rate must lie in (0, 1]".into());
        }
        if !(self.half_life > 0.0 && self.half_life.is_finite()) {
            return bad("half_life must be positive".into());
        }
        if self.n_requests > 0 && self.warmup_requests == 0 {
            return bad("warmup_requests must be positive".into());
        }
        for p in self.plans.plans() {
            p.validate().map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    /// Expected raw score over the candidate population, tags included.
    pub fn population_mean_raw(&self) -> f64 {
        self.content_mix
            .iter()
            .filter(|(_, p)| **p > 0.0)
            .map(|(ct, p)| {
                let mut scale = 1.0;
                for t in self.tags.iter().filter(|t| t.content_type.as_ref().is_none_or(|c| c == ct)) {
                    scale *= 1.0 - t.prob + t.prob * t.score_scale;
                }
                p * self.score_model[ct].mean() * scale
            })
            .sum()
    }

    /// Fixed factor mapping a raw score to the item's true completion
    /// propensity. Outcomes are drawn from `raw * true_scale()`, which is
    /// what a well-estimated alignment reproduces.
    pub fn true_scale(&self) -> f64 {
        self.anchor_base_rate / self.population_mean_raw().max(f64::MIN_POSITIVE)
    }

    /// Slots filled per request.
    pub fn exposures_per_request(&self) -> usize {
        self.k.min(self.candidates_per_request)
    }
}
