//! Ready-made configurations for the standard experiments.

use crate::model::{ContentType, Plan, PlanRegistry, Selector};

use super::config::{SimConfig, TagSpec};

pub const AD_PLAN: &str = "ads";
pub const FRESH_PLAN: &str = "fresh";
pub const QUALITY_PLAN: &str = "quality";
pub const WASTEFUL_PLAN: &str = "clickbait";

pub fn ad_plan(target_share: f64) -> Plan {
    Plan::pid_plan(AD_PLAN, Selector::content_type(ContentType::Ad), target_share)
}

fn registry(plans: Vec<Plan>) -> PlanRegistry {
    PlanRegistry::new(plans).expect("scenario plans are valid")
}

/// Keep aggregates only; nothing per event is retained.
pub fn lean(mut config: SimConfig) -> SimConfig {
    config.log_unexposed = false;
    config.retain_events = false;
    config.retain_decisions = false;
    config
}

/// Delivered ad plan at a 10% share under default gains, 500 ticks.
pub fn pid_convergence(seed: u64) -> SimConfig {
    lean(SimConfig {
        seed,
        n_requests: 250_000,
        plans: registry(vec![ad_plan(0.10)]),
        ..SimConfig::default()
    })
}

/// Delivered ad plan plus a multiplicative cold-start plan, to be compared
/// with its exposure-matched legacy counterpart.
pub fn inflation(seed: u64) -> SimConfig {
    lean(SimConfig {
        seed,
        n_requests: 50_000,
        control_tick: 250,
        plans: registry(vec![
            ad_plan(0.10),
            Plan::static_plan(FRESH_PLAN, Selector::content_type(ContentType::ColdStart), 0.5, 0.0),
        ]),
        ..SimConfig::default()
    })
}

/// Three static plans, one of which pushes low-value tagged items with a
/// large bias.
pub fn wasteful_plan(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        n_requests: 20_000,
        tags: vec![
            TagSpec {
                tag: WASTEFUL_PLAN.into(),
                content_type: Some(ContentType::Organic),
                prob: 0.1,
                score_scale: 0.15,
            },
            TagSpec {
                tag: QUALITY_PLAN.into(),
                content_type: Some(ContentType::Organic),
                prob: 0.1,
                score_scale: 1.3,
            },
        ],
        plans: registry(vec![
            Plan::static_plan(FRESH_PLAN, Selector::content_type(ContentType::ColdStart), 0.0, 0.03),
            Plan::static_plan(QUALITY_PLAN, Selector::tag(QUALITY_PLAN), 0.1, 0.0),
            Plan::static_plan(WASTEFUL_PLAN, Selector::tag(WASTEFUL_PLAN), 0.0, 0.3),
        ]),
        retain_decisions: false,
        ..SimConfig::default()
    }
}

/// Plan-free traffic with 10^5 exposures for the calibration sweep.
pub fn anchor_sweep(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        n_requests: 20_000,
        log_unexposed: false,
        retain_decisions: false,
        ..SimConfig::default()
    }
}

/// `config` with one plan removed from its registry.
pub fn without_plan(config: &SimConfig, plan_id: &str) -> SimConfig {
    let plans = config.plans.remove(plan_id).unwrap_or_else(|_| config.plans.clone());
    SimConfig {
        plans,
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_validate() {
        for c in [pid_convergence(1), inflation(1), wasteful_plan(1), anchor_sweep(1)] {
            c.validate().unwrap();
        }
        let w = wasteful_plan(1);
        let ablated = without_plan(&w, WASTEFUL_PLAN);
        assert_eq!(ablated.plans.len(), 2);
        assert!(ablated.plans.get(WASTEFUL_PLAN).is_none());
    }
}
