//! Value alignment: rescale raw blending scores into anchor-metric units via
//! `y = y' * mu_anchor / mu_score`, and keep the two global means current
//! with a per-event exponential moving average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Timestamp;

pub const DEFAULT_SCORE_FLOOR: f64 = 1e-9;
pub const DEFAULT_ANCHOR_FLOOR: f64 = 1e-6;
pub const DEFAULT_MIN_BOOTSTRAP: usize = 1000;
pub const DEFAULT_HALF_LIFE: f64 = 100_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("degenerate alignment parameters: mu_score={mu_score}, mu_anchor={mu_anchor}")]
    DegenerateParams { mu_score: f64, mu_anchor: f64 },

    #[error("need at least {required} samples to bootstrap, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("every bootstrap sample has a zero raw score")]
    AllZeroScores,

    #[error("invalid anchor sample: {0}")]
    InvalidSample(String),

    #[error("half-life must be positive, got {0}")]
    InvalidHalfLife(f64),
}

/// Global alignment parameters. One set per deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub mu_score: f64,
    pub mu_anchor: f64,
    pub sample_count: u64,
    #[serde(default)]
    pub updated_at: Timestamp,
    pub half_life: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSample {
    pub raw_score: f64,
    pub anchor_outcome: f64,
}

impl AnchorSample {
    pub fn new(raw_score: f64, anchor_outcome: f64) -> Self {
        Self {
            raw_score,
            anchor_outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub score_floor: f64,
    pub anchor_floor: f64,
    pub min_bootstrap: usize,
    pub half_life: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            score_floor: DEFAULT_SCORE_FLOOR,
            anchor_floor: DEFAULT_ANCHOR_FLOOR,
            min_bootstrap: DEFAULT_MIN_BOOTSTRAP,
            half_life: DEFAULT_HALF_LIFE,
        }
    }
}

impl AlignmentParams {
    /// Build parameters directly, e.g. from an operator-supplied document.
    pub fn new(mu_score: f64, mu_anchor: f64) -> Result<Self, AlignmentError> {
        let p = Self {
            mu_score,
            mu_anchor,
            sample_count: 0,
            updated_at: 0,
            half_life: DEFAULT_HALF_LIFE,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        let ok = self.mu_score.is_finite()
            && self.mu_score >= DEFAULT_SCORE_FLOOR
            && self.mu_anchor.is_finite()
            && self.mu_anchor > 0.0
            && self.mu_anchor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(AlignmentError::DegenerateParams {
                mu_score: self.mu_score,
                mu_anchor: self.mu_anchor,
            })
        }
    }

    /// The multiplier applied to raw scores.
    pub fn ratio(&self) -> f64 {
        self.mu_anchor / self.mu_score
    }

    /// Per-event EMA decay for the configured half-life.
    pub fn decay(&self) -> f64 {
        ema_decay(self.half_life)
    }
}

/// `1 - 2^(-1/half_life)`.
pub fn ema_decay(half_life: f64) -> f64 {
    1.0 - (-1.0 / half_life).exp2()
}

/// Map a raw score into anchor-metric units.
pub fn align_score(raw: f64, params: &AlignmentParams) -> Result<f64, AlignmentError> {
    params.validate()?;
    Ok(raw * params.ratio())
}

/// Initial parameters from a batch of logged exposures.
pub fn bootstrap_alignment(
    samples: &[AnchorSample],
    half_life: f64,
    config: &AlignmentConfig,
) -> Result<AlignmentParams, AlignmentError> {
    if !(half_life > 0.0 && half_life.is_finite()) {
        return Err(AlignmentError::InvalidHalfLife(half_life));
    }
    if samples.len() < config.min_bootstrap || samples.is_empty() {
        return Err(AlignmentError::InsufficientSamples {
            required: config.min_bootstrap.max(1),
            got: samples.len(),
        });
    }
    check_samples(samples)?;
    if samples.iter().all(|s| s.raw_score == 0.0) {
        return Err(AlignmentError::AllZeroScores);
    }
    let n = samples.len() as f64;
    let mu_score = samples.iter().map(|s| s.raw_score).sum::<f64>() / n;
    let mu_anchor = samples.iter().map(|s| s.anchor_outcome).sum::<f64>() / n;
    Ok(AlignmentParams {
        mu_score: mu_score.max(config.score_floor),
        mu_anchor: clamp_anchor(mu_anchor, config.anchor_floor),
        sample_count: samples.len() as u64,
        updated_at: 0,
        half_life,
    })
}

/// Fold a batch into the running means, one event at a time, in order.
///
/// Floors are re-applied after every event so that processing `[a; b]`
/// gives exactly the same result as processing `a` and then `b`.
pub fn update_alignment(
    params: &AlignmentParams,
    batch: &[AnchorSample],
    config: &AlignmentConfig,
) -> AlignmentParams {
    let alpha = params.decay();
    let mut next = params.clone();
    for s in batch {
        if !s.raw_score.is_finite() || !s.anchor_outcome.is_finite() || s.raw_score < 0.0 {
            continue;
        }
        next.mu_score = (next.mu_score + alpha * (s.raw_score - next.mu_score)).max(config.score_floor);
        next.mu_anchor = clamp_anchor(
            next.mu_anchor + alpha * (s.anchor_outcome - next.mu_anchor),
            config.anchor_floor,
        );
        next.sample_count += 1;
    }
    next
}

fn clamp_anchor(mu: f64, floor: f64) -> f64 {
    mu.clamp(floor, 1.0)
}

fn check_samples(samples: &[AnchorSample]) -> Result<(), AlignmentError> {
    for s in samples {
        if !s.raw_score.is_finite() || s.raw_score < 0.0 {
            return Err(AlignmentError::InvalidSample(format!("raw_score {}", s.raw_score)));
        }
        if !s.anchor_outcome.is_finite() {
            return Err(AlignmentError::InvalidSample("non-finite anchor outcome".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(mu_score: f64, mu_anchor: f64) -> AlignmentParams {
        AlignmentParams::new(mu_score, mu_anchor).unwrap()
    }

    fn small_cfg(min: usize) -> AlignmentConfig {
        AlignmentConfig {
            min_bootstrap: min,
            ..Default::default()
        }
    }

    #[test]
    fn align_examples() {
        let p = params(0.8, 0.4);
        assert_eq!(align_score(0.0, &p).unwrap(), 0.0);
        assert_eq!(align_score(0.8, &p).unwrap(), 0.4);
        assert!((align_score(2.0, &p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_params_rejected() {
        let p = AlignmentParams {
            mu_score: 1e-12,
            mu_anchor: 0.3,
            sample_count: 0,
            updated_at: 0,
            half_life: 10.0,
        };
        assert!(matches!(align_score(1.0, &p), Err(AlignmentError::DegenerateParams { .. })));
    }

    #[test]
    fn bootstrap_examples() {
        let s = [AnchorSample::new(1.0, 1.0), AnchorSample::new(1.0, 0.0)];
        let p = bootstrap_alignment(&s, 100.0, &small_cfg(2)).unwrap();
        assert_eq!(p.mu_score, 1.0);
        assert_eq!(p.mu_anchor, 0.5);
        assert_eq!(p.sample_count, 2);

        let zeros: Vec<_> = (0..10).map(|i| AnchorSample::new(i as f64 + 1.0, 0.0)).collect();
        let p = bootstrap_alignment(&zeros, 100.0, &small_cfg(10)).unwrap();
        assert_eq!(p.mu_anchor, DEFAULT_ANCHOR_FLOOR);

        let few = vec![AnchorSample::new(1.0, 1.0); 500];
        assert_eq!(
            bootstrap_alignment(&few, 100.0, &AlignmentConfig::default()),
            Err(AlignmentError::InsufficientSamples { required: 1000, got: 500 })
        );

        let all_zero = vec![AnchorSample::new(0.0, 1.0); 5];
        assert_eq!(
            bootstrap_alignment(&all_zero, 100.0, &small_cfg(5)),
            Err(AlignmentError::AllZeroScores)
        );
    }

    #[test]
    fn update_examples() {
        let cfg = AlignmentConfig::default();
        let mut p = params(1.0, 0.5);
        p.half_life = 1.0;
        assert_eq!(p.decay(), 0.5);

        assert_eq!(update_alignment(&p, &[], &cfg), p);

        let fixed = update_alignment(&p, &[AnchorSample::new(1.0, 0.5); 3], &cfg);
        assert_eq!(fixed.mu_score, 1.0);
        assert_eq!(fixed.mu_anchor, 0.5);
        assert_eq!(fixed.sample_count, 3);

        let stepped = update_alignment(&p, &[AnchorSample::new(2.0, 0.5)], &cfg);
        assert_eq!(stepped.mu_score, 1.5);
    }

    #[test]
    fn update_keeps_params_valid() {
        let cfg = AlignmentConfig::default();
        let mut p = params(1.0, 0.5);
        p.half_life = 1.0;
        let zeros = vec![AnchorSample::new(0.0, 0.0); 200];
        let q = update_alignment(&p, &zeros, &cfg);
        assert!(q.validate().is_ok());
        assert_eq!(q.mu_score, DEFAULT_SCORE_FLOOR);
        assert_eq!(q.mu_anchor, DEFAULT_ANCHOR_FLOOR);
        let big = update_alignment(&p, &[AnchorSample::new(1.0, 30.0)], &cfg);
        assert_eq!(big.mu_anchor, 1.0);
    }

    fn sample() -> impl Strategy<Value = AnchorSample> {
        (0.0f64..10.0, prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0])
            .prop_map(|(r, o)| AnchorSample::new(r, o))
    }

    proptest! {
        #[test]
        fn align_preserves_order(raws in prop::collection::vec(0.0f64..100.0, 1..40),
                                 mu_s in 0.01f64..10.0, mu_a in 0.001f64..1.0) {
            let p = params(mu_s, mu_a);
            let aligned: Vec<f64> = raws.iter().map(|&r| align_score(r, &p).unwrap()).collect();
            for i in 0..raws.len() {
                for j in 0..raws.len() {
                    if raws[i] < raws[j] {
                        prop_assert!(aligned[i] <= aligned[j]);
                    }
                }
            }
        }

        #[test]
        fn scale_equivariance(raw in 0.0f64..100.0, c in 0.01f64..100.0,
                              mu_s in 0.01f64..10.0, mu_a in 0.001f64..1.0) {
            let p = params(mu_s, mu_a);
            let scaled = params(mu_s * c, mu_a);
            let a = align_score(raw * c, &scaled).unwrap();
            let b = align_score(raw, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }

        #[test]
        fn update_is_associative(a in prop::collection::vec(sample(), 0..50),
                                 b in prop::collection::vec(sample(), 0..50),
                                 half_life in 0.5f64..1000.0) {
            let cfg = AlignmentConfig::default();
            let mut p = params(1.0, 0.3);
            p.half_life = half_life;
            let joined: Vec<_> = a.iter().chain(b.iter()).copied().collect();
            let once = update_alignment(&p, &joined, &cfg);
            let twice = update_alignment(&update_alignment(&p, &a, &cfg), &b, &cfg);
            prop_assert_eq!(once, twice);
        }
    }
}
