//! Shared domain types: candidates, plans, the plan registry and the
//! per-item score decomposition carried by every blend decision.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::AlignmentParams;
use crate::control::PidConfig;

/// Logical timestamp. The simulator uses the request index, the service a
/// monotonically increasing request sequence number.
pub type Timestamp = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("candidate {id:?} has negative raw score {score}")]
    NegativeRawScore { id: String, score: f64 },

    #[error("candidate {id:?} has non-finite raw score")]
    NonFiniteRawScore { id: String },

    #[error("candidate id is empty")]
    EmptyId,

    #[error("duplicate candidate id {0:?} in request")]
    DuplicateCandidate(String),

    #[error("duplicate plan id {0:?}")]
    DuplicatePlan(String),

    #[error("unknown plan {0:?}")]
    UnknownPlan(String),

    #[error("invalid plan {plan_id:?}: {reason}")]
    InvalidPlan { plan_id: String, reason: String },
}

/// Half-open time range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        ts >= self.start && ts < self.end
    }

    /// The fixed-length window with index `id`.
    pub fn nth(id: u64, len: u64) -> Self {
        Self::new(id * len, (id + 1) * len)
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ContentType {
    Organic,
    Ad,
    ColdStart,
    Other(String),
}

impl ContentType {
    pub fn as_str(&self) -> &str {
        match self {
            ContentType::Organic => "organic",
            ContentType::Ad => "ad",
            ContentType::ColdStart => "cold_start",
            ContentType::Other(tag) => tag,
        }
    }
}

impl From<String> for ContentType {
    fn from(s: String) -> Self {
        match s.as_str() {
            "organic" => ContentType::Organic,
            "ad" => ContentType::Ad,
            "cold_start" => ContentType::ColdStart,
            _ => ContentType::Other(s),
        }
    }
}

impl From<&str> for ContentType {
    fn from(s: &str) -> Self {
        ContentType::from(s.to_string())
    }
}

impl From<ContentType> for String {
    fn from(ct: ContentType) -> Self {
        ct.as_str().to_string()
    }
}

impl fmt::Display for ContentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One item entering the blending stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub content_type: ContentType,
    pub raw_score: f64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tags: BTreeSet<String>,
}

impl Candidate {
    pub fn new(id: impl Into<String>, content_type: ContentType, raw_score: f64) -> Self {
        Self {
            id: id.into(),
            content_type,
            raw_score,
            tags: BTreeSet::new(),
        }
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }
}

pub fn validate_candidate(candidate: Candidate) -> Result<Candidate, ModelError> {
    if candidate.id.is_empty() {
        return Err(ModelError::EmptyId);
    }
    if !candidate.raw_score.is_finite() {
        return Err(ModelError::NonFiniteRawScore { id: candidate.id });
    }
    if candidate.raw_score < 0.0 {
        return Err(ModelError::NegativeRawScore {
            score: candidate.raw_score,
            id: candidate.id,
        });
    }
    Ok(candidate)
}

/// Conjunction of an optional content-type equality and an optional tag
/// membership test. A selector with neither constraint matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<ContentType>,
    /// Matches when the candidate carries at least one of these tags.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tags: BTreeSet<String>,
}

impl Selector {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn content_type(ct: ContentType) -> Self {
        Self {
            content_type: Some(ct),
            tags: BTreeSet::new(),
        }
    }

    pub fn tag(tag: impl Into<String>) -> Self {
        Self {
            content_type: None,
            tags: [tag.into()].into_iter().collect(),
        }
    }

    pub fn matches(&self, content_type: &ContentType, tags: &BTreeSet<String>) -> bool {
        if let Some(ct) = &self.content_type {
            if ct != content_type {
                return false;
            }
        }
        self.tags.is_empty() || self.tags.iter().any(|t| tags.contains(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Static,
    PidDelivered,
    Hybrid,
}

fn default_true() -> bool {
    true
}

/// One business weighting scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: String,
    #[serde(default)]
    pub selector: Selector,
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub bias: f64,
    pub mode: PlanMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_share: Option<f64>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Controller gains and clamps for `pid_delivered` plans; defaults apply
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<PidConfig>,
}

impl Plan {
    pub fn static_plan(plan_id: impl Into<String>, selector: Selector, weight: f64, bias: f64) -> Self {
        Self {
            plan_id: plan_id.into(),
            selector,
            weight,
            bias,
            mode: PlanMode::Static,
            target_share: None,
            enabled: true,
            controller: None,
        }
    }

    pub fn pid_plan(plan_id: impl Into<String>, selector: Selector, target_share: f64) -> Self {
        Self {
            plan_id: plan_id.into(),
            selector,
            weight: 0.0,
            bias: 0.0,
            mode: PlanMode::PidDelivered,
            target_share: Some(target_share),
            enabled: true,
            controller: None,
        }
    }

    pub fn hybrid_plan(plan_id: impl Into<String>, selector: Selector, weight: f64, bias: f64) -> Self {
        Self {
            mode: PlanMode::Hybrid,
            ..Self::static_plan(plan_id, selector, weight, bias)
        }
    }

    /// The indicator of plan membership.
    pub fn applies(&self, candidate: &Candidate) -> bool {
        self.selector.matches(&candidate.content_type, &candidate.tags)
    }

    pub fn controller_config(&self) -> PidConfig {
        self.controller.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::InvalidPlan {
            plan_id: self.plan_id.clone(),
            reason: reason.to_string(),
        };
        if self.plan_id.is_empty() {
            return Err(invalid("empty plan id"));
        }
        if !self.weight.is_finite() || !self.bias.is_finite() {
            return Err(invalid("weight and bias must be finite"));
        }
        if let Some(t) = self.target_share {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid("target_share must lie in [0, 1]"));
            }
        }
        if self.mode == PlanMode::PidDelivered {
            if self.target_share.is_none() {
                return Err(invalid("pid_delivered plans need a target_share"));
            }
            if self.weight != 0.0 {
                return Err(invalid("pid_delivered plans have weight fixed at 0"));
            }
        }
        if let Some(cfg) = &self.controller {
            cfg.validate().map_err(|reason| invalid(&reason))?;
        }
        Ok(())
    }
}

pub fn plan_applies(plan: &Plan, candidate: &Candidate) -> bool {
    plan.applies(candidate)
}

/// Ordered, versioned set of plans. Mutations produce a new registry with
/// the version bumped; existing values are never modified in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegistryDoc")]
pub struct PlanRegistry {
    plans: Vec<Plan>,
    version: u64,
}

#[derive(Deserialize)]
struct RegistryDoc {
    #[serde(default)]
    plans: Vec<Plan>,
    #[serde(default)]
    version: u64,
}

impl TryFrom<RegistryDoc> for PlanRegistry {
    type Error = ModelError;

    fn try_from(doc: RegistryDoc) -> Result<Self, Self::Error> {
        let mut reg = PlanRegistry::new(doc.plans)?;
        reg.version = doc.version;
        Ok(reg)
    }
}

impl Default for PlanRegistry {
    fn default() -> Self {
        Self {
            plans: Vec::new(),
            version: 0,
        }
    }
}

impl PlanRegistry {
    pub fn new(mut plans: Vec<Plan>) -> Result<Self, ModelError> {
        for p in &plans {
            p.validate()?;
        }
        plans.sort_by(|a, b| a.plan_id.cmp(&b.plan_id));
        if let Some(w) = plans.windows(2).find(|w| w[0].plan_id == w[1].plan_id) {
            return Err(ModelError::DuplicatePlan(w[0].plan_id.clone()));
        }
        Ok(Self { plans, version: 0 })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// All plans in lexicographic `plan_id` order.
    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }

    pub fn enabled(&self) -> impl Iterator<Item = &Plan> {
        self.plans.iter().filter(|p| p.enabled)
    }

    pub fn get(&self, plan_id: &str) -> Option<&Plan> {
        self.plans
            .binary_search_by(|p| p.plan_id.as_str().cmp(plan_id))
            .ok()
            .map(|i| &self.plans[i])
    }

    pub fn contains(&self, plan_id: &str) -> bool {
        self.get(plan_id).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    /// Same plans, version + 1.
    pub fn bumped(&self) -> Self {
        Self {
            plans: self.plans.clone(),
            version: self.version + 1,
        }
    }

    /// Insert or replace a plan.
    pub fn upsert(&self, plan: Plan) -> Result<Self, ModelError> {
        plan.validate()?;
        let mut plans = self.plans.clone();
        match plans.binary_search_by(|p| p.plan_id.cmp(&plan.plan_id)) {
            Ok(i) => plans[i] = plan,
            Err(i) => plans.insert(i, plan),
        }
        Ok(Self {
            plans,
            version: self.version + 1,
        })
    }

    pub fn remove(&self, plan_id: &str) -> Result<Self, ModelError> {
        let mut plans = self.plans.clone();
        let i = plans
            .binary_search_by(|p| p.plan_id.as_str().cmp(plan_id))
            .map_err(|_| ModelError::UnknownPlan(plan_id.to_string()))?;
        plans.remove(i);
        Ok(Self {
            plans,
            version: self.version + 1,
        })
    }

    /// Apply `f` to every plan named in `ids`, validating the results.
    pub fn modify<F>(&self, ids: impl IntoIterator<Item = impl AsRef<str>>, mut f: F) -> Result<Self, ModelError>
    where
        F: FnMut(&mut Plan) -> Result<(), ModelError>,
    {
        let mut plans = self.plans.clone();
        for id in ids {
            let id = id.as_ref();
            let i = plans
                .binary_search_by(|p| p.plan_id.as_str().cmp(id))
                .map_err(|_| ModelError::UnknownPlan(id.to_string()))?;
            f(&mut plans[i])?;
            plans[i].validate()?;
        }
        Ok(Self {
            plans,
            version: self.version + 1,
        })
    }

    /// Used when restoring a persisted registry.
    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }
}

/// Full per-item score breakdown recorded with each decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    pub candidate_id: String,
    pub raw: f64,
    pub aligned: f64,
    /// Keyed by plan id, so iteration is the fixed summation order.
    #[serde(default)]
    pub plan_boosts: BTreeMap<String, f64>,
    #[serde(rename = "final")]
    pub final_score: f64,
}

impl ScoreDecomposition {
    pub fn new(candidate_id: impl Into<String>, raw: f64, aligned: f64, plan_boosts: BTreeMap<String, f64>) -> Self {
        let mut d = Self {
            candidate_id: candidate_id.into(),
            raw,
            aligned,
            plan_boosts,
            final_score: 0.0,
        };
        d.final_score = d.reconstruct();
        d
    }

    /// `aligned` plus the boosts summed in plan-id order.
    pub fn reconstruct(&self) -> f64 {
        self.plan_boosts.values().fold(self.aligned, |acc, b| acc + b)
    }

    /// Final score with one plan's term left out, summed in the same order.
    pub fn final_without(&self, plan_id: &str) -> f64 {
        self.plan_boosts
            .iter()
            .filter(|(id, _)| id.as_str() != plan_id)
            .fold(self.aligned, |acc, (_, b)| acc + b)
    }

    pub fn is_additive(&self) -> bool {
        self.reconstruct() == self.final_score
    }

    pub fn boost_total(&self) -> f64 {
        self.plan_boosts.values().sum()
    }

    pub fn is_member(&self, plan_id: &str) -> bool {
        self.plan_boosts.contains_key(plan_id)
    }
}

/// Ranking comparator: final score descending, then candidate id ascending.
pub fn rank_order(a_final: f64, a_id: &str, b_final: f64, b_id: &str) -> Ordering {
    b_final
        .partial_cmp(&a_final)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_id.cmp(b_id))
}

pub fn compare_decompositions(a: &ScoreDecomposition, b: &ScoreDecomposition) -> Ordering {
    rank_order(a.final_score, &a.candidate_id, b.final_score, &b.candidate_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendDecision {
    pub request_id: String,
    pub ranked: Vec<ScoreDecomposition>,
    pub exposed_k: usize,
    pub registry_version: u64,
    pub alignment_snapshot: AlignmentParams,
}

impl BlendDecision {
    pub fn exposed(&self) -> &[ScoreDecomposition] {
        &self.ranked[..self.exposed_k.min(self.ranked.len())]
    }

    pub fn get(&self, candidate_id: &str) -> Option<&ScoreDecomposition> {
        self.ranked.iter().find(|d| d.candidate_id == candidate_id)
    }

    pub fn position(&self, candidate_id: &str) -> Option<usize> {
        self.ranked.iter().position(|d| d.candidate_id == candidate_id)
    }

    pub fn is_sorted(&self) -> bool {
        self.ranked
            .windows(2)
            .all(|w| compare_decompositions(&w[0], &w[1]) != Ordering::Greater)
    }
}
