//! Value-aligned linear boosting for a multi-source blending stage.
//!
//! Every candidate score is rescaled onto a shared anchor-metric scale,
//! business plans add independent boosts on top, and the final score is the
//! plain sum of the two. That additivity is what makes exact per-plan
//! attribution, PID delivery control and stage-wise drift tracking possible.

pub mod alignment;
pub mod appender;
pub mod attribution;
pub mod blender;
pub mod control;
pub mod model;
pub mod sim;
pub mod tracking;

pub use alignment::{align_score, bootstrap_alignment, update_alignment, AlignmentConfig, AlignmentParams, AnchorSample};
pub use blender::{blend, compute_boost, legacy_blend, BlendRequest, Pipeline};
pub use control::{pid_step, DeliveryController, PidConfig, PidState};
pub use model::{BlendDecision, Candidate, ContentType, Plan, PlanMode, PlanRegistry, ScoreDecomposition, Selector, TimeWindow};
pub use tracking::{drift_score, ExposureEvent, Stage, StageHistogram, Tracker, TrackerConfig};
