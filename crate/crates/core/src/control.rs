//! Guaranteed-delivery control: a positional discrete PID that turns the
//! measured exposure share of a plan into that plan's additive bias.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Plan, PlanMode, PlanRegistry, TimeWindow};
use crate::tracking::ExposureEvent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("no exposures in window {0}")]
    EmptyWindow(TimeWindow),

    #[error("unknown plan {0:?}")]
    UnknownPlan(String),

    #[error("plan {0:?} is not pid_delivered")]
    WrongMode(String),

    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub output_min: f64,
    pub output_max: f64,
    /// Symmetric bound on the accumulated error.
    pub windup_limit: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 0.1,
            kd: 0.0,
            output_min: 0.0,
            output_max: 1.0,
            windup_limit: 20.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.kp, self.ki, self.kd, self.output_min, self.output_max, self.windup_limit]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("controller parameters must be finite".into());
        }
        if self.output_min > self.output_max {
            return Err("output_min exceeds output_max".into());
        }
        if self.windup_limit < 0.0 {
            return Err("windup_limit must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    pub last_error: Option<f64>,
    pub output_min: f64,
    pub output_max: f64,
    pub windup_limit: f64,
    pub last_output: f64,
}

impl PidState {
    pub fn new(config: &PidConfig) -> Self {
        Self {
            kp: config.kp,
            ki: config.ki,
            kd: config.kd,
            integral: 0.0,
            last_error: None,
            output_min: config.output_min,
            output_max: config.output_max,
            windup_limit: config.windup_limit,
            last_output: 0.0f64.clamp(config.output_min, config.output_max),
        }
    }

    /// Swap in new gains and clamps, keeping the accumulated history.
    pub fn reconfigure(&mut self, config: &PidConfig) {
        self.kp = config.kp;
        self.ki = config.ki;
        self.kd = config.kd;
        self.output_min = config.output_min;
        self.output_max = config.output_max;
        self.windup_limit = config.windup_limit;
        self.integral = self.integral.clamp(-self.windup_limit, self.windup_limit);
        self.last_output = self.last_output.clamp(self.output_min, self.output_max);
    }

    pub fn config(&self) -> PidConfig {
        PidConfig {
            kp: self.kp,
            ki: self.ki,
            kd: self.kd,
            output_min: self.output_min,
            output_max: self.output_max,
            windup_limit: self.windup_limit,
        }
    }
}

/// One controller transition. Pure in `(state, measured, target, dt)`.
///
/// Conditional integration: while the output sits on a clamp and the error
/// keeps pushing into that clamp, the integral is held where it was.
pub fn pid_step(state: &PidState, measured: f64, target: f64, dt: f64) -> (PidState, f64) {
    debug_assert!(dt > 0.0, "dt must be positive");
    let error = target - measured;
    let advanced = (state.integral + error * dt).clamp(-state.windup_limit, state.windup_limit);
    let derivative = state.last_error.map_or(0.0, |last| (error - last) / dt);
    let unclamped = state.kp * error + state.ki * advanced + state.kd * derivative;
    let bias = unclamped.clamp(state.output_min, state.output_max);

    let push = state.ki * error;
    let saturated_high = unclamped > state.output_max && push > 0.0;
    let saturated_low = unclamped < state.output_min && push < 0.0;
    let integral = if saturated_high || saturated_low {
        state.integral
    } else {
        advanced
    };

    let next = PidState {
        integral,
        last_error: Some(error),
        last_output: bias,
        ..state.clone()
    };
    (next, bias)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureMeasurement {
    pub plan_id: String,
    pub window_start: u64,
    pub window_end: u64,
    pub exposed_plan: u64,
    pub exposed_total: u64,
    pub share: Option<f64>,
}

/// Share of exposures in `window` that belonged to `plan`, judged by the
/// plan's selector against what was logged for each item.
pub fn measure_exposure_share(
    events: &[ExposureEvent],
    plan: &Plan,
    window: TimeWindow,
) -> Result<ExposureMeasurement, ControlError> {
    let mut total = 0u64;
    let mut members = 0u64;
    for e in events.iter().filter(|e| e.exposed && window.contains(e.timestamp)) {
        total += 1;
        if plan.selector.matches(&e.content_type, &e.tags) {
            members += 1;
        }
    }
    if total == 0 {
        return Err(ControlError::EmptyWindow(window));
    }
    Ok(ExposureMeasurement {
        plan_id: plan.plan_id.clone(),
        window_start: window.start,
        window_end: window.end,
        exposed_plan: members,
        exposed_total: total,
        share: Some(members as f64 / total as f64),
    })
}

/// Write controller biases into their plans; the version is bumped once.
pub fn apply_controller_outputs(
    registry: &PlanRegistry,
    outputs: &BTreeMap<String, f64>,
) -> Result<PlanRegistry, ControlError> {
    for id in outputs.keys() {
        let plan = registry
            .get(id)
            .ok_or_else(|| ControlError::UnknownPlan(id.clone()))?;
        if plan.mode != PlanMode::PidDelivered {
            return Err(ControlError::WrongMode(id.clone()));
        }
    }
    if outputs.is_empty() {
        return Ok(registry.bumped());
    }
    Ok(registry.modify(outputs.keys(), |p| {
        p.bias = outputs[&p.plan_id];
        Ok(())
    })?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTick {
    pub plan_id: String,
    pub window: TimeWindow,
    pub measured: f64,
    pub target: f64,
    pub bias: f64,
}

/// Per-plan controller states driven once per tracking window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryController {
    states: BTreeMap<String, PidState>,
    #[serde(default = "default_dt")]
    dt: f64,
}

fn default_dt() -> f64 {
    1.0
}

impl Default for DeliveryController {
    fn default() -> Self {
        Self::new()
    }
}

impl DeliveryController {
    pub fn new() -> Self {
        Self {
            states: BTreeMap::new(),
            dt: 1.0,
        }
    }

    pub fn state(&self, plan_id: &str) -> Option<&PidState> {
        self.states.get(plan_id)
    }

    pub fn states(&self) -> &BTreeMap<String, PidState> {
        &self.states
    }

    /// Measure every enabled `pid_delivered` plan over `window`, step its
    /// controller and write the new biases. Plans whose window is empty are
    /// skipped with their state untouched. Returns the registry unchanged
    /// (same version) when nothing was stepped.
    pub fn tick(
        &mut self,
        registry: &PlanRegistry,
        events: &[ExposureEvent],
        window: TimeWindow,
    ) -> Result<(PlanRegistry, Vec<ControlTick>), ControlError> {
        let mut outputs = BTreeMap::new();
        let mut ticks = Vec::new();
        for plan in registry
            .enabled()
            .filter(|p| p.mode == PlanMode::PidDelivered)
        {
            let target = match plan.target_share {
                Some(t) => t,
                None => continue,
            };
            let measured = match measure_exposure_share(events, plan, window) {
                Ok(m) => m.share.unwrap_or(0.0),
                Err(ControlError::EmptyWindow(_)) => continue,
                Err(e) => return Err(e),
            };
            let config = plan.controller_config();
            let state = self
                .states
                .entry(plan.plan_id.clone())
                .or_insert_with(|| PidState::new(&config));
            if state.config() != config {
                state.reconfigure(&config);
            }
            let (next, bias) = pid_step(state, measured, target, self.dt);
            *state = next;
            outputs.insert(plan.plan_id.clone(), bias);
            ticks.push(ControlTick {
                plan_id: plan.plan_id.clone(),
                window,
                measured,
                target,
                bias,
            });
        }
        if outputs.is_empty() {
            return Ok((registry.clone(), ticks));
        }
        Ok((apply_controller_outputs(registry, &outputs)?, ticks))
    }
}
