//! Candidate generation and posterior outcome draws.

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal};

use crate::blender::BlendRequest;
use crate::model::{Candidate, ContentType};

use super::config::{OutcomeModel, SimConfig};

pub const EFFECTIVE_COMPLETION: &str = "effective_completion";
pub const PLAY_DURATION: &str = "play_duration";
pub const CLICK: &str = "click";
pub const BUY: &str = "buy";
pub const INTERACTION: &str = "interaction";
pub const SLIDE: &str = "slide";

pub const METRICS: [&str; 6] = [EFFECTIVE_COMPLETION, PLAY_DURATION, CLICK, BUY, INTERACTION, SLIDE];

/// Seconds of play above which an exposure counts as a valued view.
pub const VALUED_VV_SECONDS: f64 = 3.0;

const STREAM_REQUEST: u64 = 1;
const STREAM_OUTCOME: u64 = 2;
const STREAM_WARMUP: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, stream, a, b)` coordinate.
pub fn rng_for(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed ^ splitmix(stream)) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(s)
}

pub fn request_rng(seed: u64, t: u64) -> ChaCha8Rng {
    rng_for(seed, STREAM_REQUEST, t, 0)
}

pub(crate) fn warmup_rng(seed: u64, t: u64) -> ChaCha8Rng {
    rng_for(seed, STREAM_WARMUP, t, 0)
}

/// Outcome generator for candidate `index` of request `t`. Paired runs on
/// the same seed see the same draws for the same item.
pub fn outcome_rng(seed: u64, t: u64, index: u64) -> ChaCha8Rng {
    rng_for(seed, STREAM_OUTCOME, t, index)
}

pub fn candidate_id(t: u64, index: usize) -> String {
    format!("r{t}-c{index}")
}

pub fn request_id(t: u64) -> String {
    format!("r{t}")
}

/// Parse the candidate index back out of an id made by [`candidate_id`].
pub fn candidate_index(id: &str) -> Option<u64> {
    id.rsplit_once("-c").and_then(|(_, i)| i.parse().ok())
}

/// Candidate set for request `t`; depends only on `(config, t)`.
pub fn generate_request(config: &SimConfig, t: u64) -> BlendRequest {
    generate_with(config, t, &mut request_rng(config.seed, t))
}

pub(crate) fn generate_with(config: &SimConfig, t: u64, rng: &mut impl Rng) -> BlendRequest {
    let types: Vec<(&ContentType, f64)> = config.content_mix.iter().map(|(c, p)| (c, *p)).collect();
    let pick = WeightedIndex::new(types.iter().map(|(_, p)| *p)).expect("validated mix");
    let mut candidates = Vec::with_capacity(config.candidates_per_request);
    for i in 0..config.candidates_per_request {
        let ct = types[pick.sample(rng)].0.clone();
        let m = config.score_model[&ct];
        let mut raw = LogNormal::new(m.mu, m.sigma).expect("validated score model").sample(rng);
        let mut tags = Vec::new();
        for spec in &config.tags {
            if spec.content_type.as_ref().is_some_and(|c| *c != ct) {
                continue;
            }
            if rng.random::<f64>() < spec.prob {
                raw *= spec.score_scale;
                tags.push(spec.tag.clone());
            }
        }
        candidates.push(Candidate::new(candidate_id(t, i), ct, raw).with_tags(tags));
    }
    BlendRequest::new(request_id(t), candidates, config.k)
}

pub fn completion_probability(model: &OutcomeModel, aligned: f64, content_type: &ContentType) -> f64 {
    let base = aligned.clamp(0.0, 1.0).powf(model.completion_exponent);
    let gap = if *content_type == ContentType::Ad { model.ad_gap } else { 0.0 };
    (base - gap).clamp(0.0, 1.0)
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Posterior metrics for one exposed item. The draw order is fixed so that
/// a given generator state always yields the same outcomes.
pub fn sample_outcomes(
    model: &OutcomeModel,
    aligned: f64,
    content_type: &ContentType,
    rng: &mut impl Rng,
) -> BTreeMap<String, f64> {
    let completed = bernoulli(rng, completion_probability(model, aligned, content_type));
    let mean = if completed > 0.0 { model.duration_completed } else { model.duration_skipped };
    let duration = Exp::new(1.0 / mean).expect("positive mean").sample(rng);
    let click = bernoulli(rng, model.click.prob(aligned));
    let interaction = bernoulli(rng, model.interaction.prob(aligned));
    let slide = bernoulli(rng, model.slide.prob(aligned));
    let buy = bernoulli(rng, model.buy_rate);
    BTreeMap::from([
        (EFFECTIVE_COMPLETION.to_string(), completed),
        (PLAY_DURATION.to_string(), duration),
        (CLICK.to_string(), click),
        (INTERACTION.to_string(), interaction),
        (SLIDE.to_string(), slide),
        (BUY.to_string(), buy),
    ])
}

/// Simulator-defined composite: `click + 2 interaction + 0.5 completion`.
pub fn valued_score(outcomes: &BTreeMap<String, f64>) -> f64 {
    let get = |m: &str| outcomes.get(m).copied().unwrap_or(0.0);
    get(CLICK) + 2.0 * get(INTERACTION) + 0.5 * get(EFFECTIVE_COMPLETION)
}

pub fn is_valued_view(outcomes: &BTreeMap<String, f64>) -> bool {
    outcomes.get(PLAY_DURATION).is_some_and(|d| *d > VALUED_VV_SECONDS)
}
