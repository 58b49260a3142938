//! Online serving path: align, boost each matching plan independently, sum
//! the terms linearly, sort and truncate.
//!
//! Also hosts the coupled-weighting baseline used as the experimental
//! control, where plan weights multiply the raw score and alignment is
//! applied only to the weighted total.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align_score, AlignmentError, AlignmentParams};
use crate::model::{
    compare_decompositions, validate_candidate, BlendDecision, Candidate, ModelError, Plan, PlanMode,
    PlanRegistry, ScoreDecomposition,
};

/// Pseudo plan id under which the coupled baseline logs its single boost.
pub const LEGACY_PLAN_ID: &str = "__legacy__";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlendError {
    #[error(transparent)]
    InvalidCandidate(#[from] ModelError),

    #[error("request {0:?} has no candidates")]
    EmptyRequest(String),

    #[error("exposure slots k must be at least 1")]
    ZeroSlots,

    #[error(transparent)]
    Alignment(#[from] AlignmentError),

    #[error("candidate {0:?} not present in decision")]
    UnknownCandidate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendRequest {
    pub request_id: String,
    pub candidates: Vec<Candidate>,
    pub k: usize,
}

impl BlendRequest {
    pub fn new(request_id: impl Into<String>, candidates: Vec<Candidate>, k: usize) -> Self {
        Self {
            request_id: request_id.into(),
            candidates,
            k,
        }
    }

    pub fn validate(&self) -> Result<(), BlendError> {
        if self.k == 0 {
            return Err(BlendError::ZeroSlots);
        }
        if self.candidates.is_empty() {
            return Err(BlendError::EmptyRequest(self.request_id.clone()));
        }
        let mut seen = HashSet::with_capacity(self.candidates.len());
        for c in &self.candidates {
            validate_candidate(c.clone())?;
            if !seen.insert(c.id.as_str()) {
                return Err(ModelError::DuplicateCandidate(c.id.clone()).into());
            }
        }
        Ok(())
    }
}

/// Which serving pipeline produces decisions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Independent linear boosting on aligned scores.
    #[default]
    Independent,
    /// Multiplicative cascade on raw scores, aligned after weighting.
    Legacy,
}

impl Pipeline {
    pub fn blend(
        self,
        request: &BlendRequest,
        registry: &PlanRegistry,
        params: &AlignmentParams,
    ) -> Result<BlendDecision, BlendError> {
        match self {
            Pipeline::Independent => blend(request, registry, params),
            Pipeline::Legacy => legacy_blend(request, registry, params),
        }
    }
}

/// Per-plan gain `1_p(v) * (w_p * y_v + b_p)`.
///
/// For `pid_delivered` plans the bias is whatever the delivery controller
/// last wrote into the registry and the weight is zero.
pub fn compute_boost(plan: &Plan, candidate: &Candidate, aligned: f64) -> f64 {
    if !plan.applies(candidate) {
        return 0.0;
    }
    match plan.mode {
        PlanMode::PidDelivered => plan.bias,
        PlanMode::Static | PlanMode::Hybrid => plan.weight * aligned + plan.bias,
    }
}

pub fn blend(
    request: &BlendRequest,
    registry: &PlanRegistry,
    params: &AlignmentParams,
) -> Result<BlendDecision, BlendError> {
    request.validate()?;
    params.validate()?;

    let mut ranked = Vec::with_capacity(request.candidates.len());
    for c in &request.candidates {
        let aligned = align_score(c.raw_score, params)?;
        let mut boosts = BTreeMap::new();
        for plan in registry.enabled() {
            if plan.applies(c) {
                boosts.insert(plan.plan_id.clone(), compute_boost(plan, c, aligned));
            }
        }
        ranked.push(ScoreDecomposition::new(c.id.clone(), c.raw_score, aligned, boosts));
    }
    Ok(finish(request, ranked, registry, params))
}

/// Coupled baseline: `raw * prod(1 + w_p) + sum(b_p)` over matching plans,
/// then aligned. The decomposition records `aligned(raw)` plus one coupled
/// boost so that `final = aligned + boost` still holds exactly.
pub fn legacy_blend(
    request: &BlendRequest,
    registry: &PlanRegistry,
    params: &AlignmentParams,
) -> Result<BlendDecision, BlendError> {
    request.validate()?;
    params.validate()?;

    let mut ranked = Vec::with_capacity(request.candidates.len());
    for c in &request.candidates {
        let aligned = align_score(c.raw_score, params)?;
        let mut factor = 1.0;
        let mut bias = 0.0;
        let mut matched = false;
        for plan in registry.enabled().filter(|p| p.applies(c)) {
            matched = true;
            factor *= 1.0 + plan.weight;
            bias += plan.bias;
        }
        let mut boosts = BTreeMap::new();
        if matched {
            let coupled = c.raw_score * factor + bias;
            let weighted = coupled * params.ratio();
            boosts.insert(LEGACY_PLAN_ID.to_string(), weighted - aligned);
        }
        ranked.push(ScoreDecomposition::new(c.id.clone(), c.raw_score, aligned, boosts));
    }
    Ok(finish(request, ranked, registry, params))
}

fn finish(
    request: &BlendRequest,
    mut ranked: Vec<ScoreDecomposition>,
    registry: &PlanRegistry,
    params: &AlignmentParams,
) -> BlendDecision {
    ranked.sort_by(compare_decompositions);
    BlendDecision {
        request_id: request.request_id.clone(),
        exposed_k: request.k.min(ranked.len()),
        ranked,
        registry_version: registry.version(),
        alignment_snapshot: params.clone(),
    }
}

/// Look up the stored breakdown for one candidate. Never recomputes.
pub fn decompose<'a>(decision: &'a BlendDecision, candidate_id: &str) -> Result<&'a ScoreDecomposition, BlendError> {
    decision
        .get(candidate_id)
        .ok_or_else(|| BlendError::UnknownCandidate(candidate_id.to_string()))
}
