//! Normalized entropy, a one-pass hashed logistic learner, and A/B comparison
//! of gating policies on the same labeled stream.
//!
//! Prediction targets are ad impressions. Each target's features are its own
//! gated attributes plus the gated attributes of the user's most recent
//! organic and new-page impressions, so source-level gating changes the
//! sequence context the model sees.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use xxhash_rust::xxh3::Xxh3;

use crate::error::{Error, Result};
use crate::event::{conversion_index, AttrValue, Event, EventSource};
use crate::gate::{gate, CostLedger, GateOutcome, GatePolicy};
use crate::segment::Segment;
use crate::stats::{label_impression, sigmoid, WindowLabel};

pub const PREDICTION_CLIP: f64 = 1e-6;
pub const GAIN_CONVENTION: &str = "ne_gain = ne_baseline - ne_treatment (positive is better)";

fn clip(p: f64) -> f64 {
    p.clamp(PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
}

/// Cross-entropy of `predictions` divided by the entropy of the empirical
/// label rate, reported as a positive number (1 = no better than the prior).
///
/// `Ok(None)` when every label is identical, since the prior entropy is zero.
pub fn normalized_entropy(labels: &[bool], predictions: &[f64]) -> Result<Option<f64>> {
    if labels.len() != predictions.len() {
        return Err(Error::Range(format!(
            "labels ({}) and predictions ({}) differ in length",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Range("normalized entropy of an empty sequence".into()));
    }
    let n = labels.len() as f64;
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Ok(None);
    }
    let prior = positives as f64 / n;
    let log_loss: f64 = labels
        .iter()
        .zip(predictions)
        .map(|(&y, &p)| {
            let p = clip(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n;
    let prior_entropy = -(prior * prior.ln() + (1.0 - prior) * (1.0 - prior).ln());
    Ok(Some(log_loss / prior_entropy))
}

/// Cumulative NE after every `step` samples (and at the end), for convergence plots.
pub fn ne_curve(labels: &[bool], predictions: &[f64], step: usize) -> Result<Vec<(usize, Option<f64>)>> {
    if step == 0 {
        return Err(Error::Config("curve step must be positive".into()));
    }
    let mut points = Vec::new();
    let mut n = step;
    while n < labels.len() {
        points.push((n, normalized_entropy(&labels[..n], &predictions[..n])?));
        n += step;
    }
    if !labels.is_empty() {
        points.push((labels.len(), normalized_entropy(labels, predictions)?));
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub hash_dim: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            learning_rate: 0.1,
            hash_dim: 1 << 18,
        }
    }
}

/// Logistic regression over hashed binary features with per-coordinate
/// AdaGrad steps.
#[derive(Debug, Clone)]
pub struct OnlineLogistic {
    weights: Vec<f64>,
    grad_sq: Vec<f64>,
    bias: f64,
    bias_grad_sq: f64,
    learning_rate: f64,
    seed: u64,
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl OnlineLogistic {
    pub fn new(cfg: &LearnerConfig, seed: u64) -> Result<Self> {
        if cfg.hash_dim < 2 {
            return Err(Error::Config(format!("hash_dim must be >= 2, got {}", cfg.hash_dim)));
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        Ok(OnlineLogistic {
            weights: vec![0.0; cfg.hash_dim],
            grad_sq: vec![0.0; cfg.hash_dim],
            bias: 0.0,
            bias_grad_sq: 0.0,
            learning_rate: cfg.learning_rate,
            seed,
        })
    }

    fn slot(&self, token: u64) -> usize {
        (mix64(token ^ mix64(self.seed)) % self.weights.len() as u64) as usize
    }

    pub fn predict(&self, tokens: &[u64]) -> f64 {
        let z = self.bias + tokens.iter().map(|&t| self.weights[self.slot(t)]).sum::<f64>();
        sigmoid(z)
    }

    pub fn update(&mut self, tokens: &[u64], label: bool, prediction: f64) {
        let g = prediction - if label { 1.0 } else { 0.0 };
        self.bias_grad_sq += g * g;
        self.bias -= self.learning_rate * g / (1.0 + self.bias_grad_sq).sqrt();
        for &t in tokens {
            let i = self.slot(t);
            self.grad_sq[i] += g * g;
            self.weights[i] -= self.learning_rate * g / (1.0 + self.grad_sq[i]).sqrt();
        }
    }
}

struct TokenHasher(Xxh3);

impl std::fmt::Write for TokenHasher {
    fn write_str(&mut self, s: &str) -> std::fmt::Result {
        self.0.update(s.as_bytes());
        Ok(())
    }
}

/// Hash of the `prefix:name=value` feature token.
pub fn feature_token(prefix: &str, name: &str, value: &AttrValue) -> u64 {
    let mut h = TokenHasher(Xxh3::new());
    write!(h, "{prefix}:{name}={value}").expect("hashing never fails");
    h.0.digest()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u64>,
    pub label: bool,
    pub segment: Segment,
}

/// Progressive validation: each prediction is made before the model sees its label.
pub fn train_predict_online(examples: &[Example], cfg: &LearnerConfig, seed: u64) -> Result<Vec<f64>> {
    let mut model = OnlineLogistic::new(cfg, seed)?;
    Ok(examples
        .iter()
        .map(|ex| {
            let p = model.predict(&ex.tokens);
            model.update(&ex.tokens, ex.label, p);
            p
        })
        .collect())
}

/// Buffered window label for every ad impression; `None` for other events.
pub fn window_labels(events: &[Event], horizon_ms: i64, buffer_ms: i64) -> Result<Vec<Option<WindowLabel>>> {
    let conversions = conversion_index(events);
    events
        .iter()
        .map(|e| {
            if e.source != EventSource::AdImpression {
                return Ok(None);
            }
            let user = conversions.get(e.user_id.as_str()).map_or(&[][..], Vec::as_slice);
            label_impression(e.timestamp_ms, user, horizon_ms, buffer_ms).map(Some)
        })
        .collect()
}

fn prefix(source: EventSource) -> &'static str {
    match source {
        EventSource::AdImpression => "ad",
        EventSource::OrganicImpression => "org",
        EventSource::NewPageImpression => "page",
        EventSource::Conversion => "conv",
    }
}

fn tokens_of(event: &Event) -> Vec<u64> {
    let p = prefix(event.source);
    event.attributes.iter().map(|(k, v)| feature_token(p, k, v)).collect()
}

/// One arm of an experiment: gated stream turned into examples, plus its ledger.
#[derive(Debug, Clone)]
pub struct Arm {
    pub examples: Vec<Example>,
    pub ledger: CostLedger,
}

/// Gates `events` under `policy` and builds one example per labeled target,
/// in time order. `segments[i]` and `labels[i]` belong to `events[i]`.
pub fn build_arm(
    events: &[Event],
    labels: &[Option<WindowLabel>],
    segments: &[Segment],
    policy: &GatePolicy,
) -> Result<Arm> {
    if labels.len() != events.len() || segments.len() != events.len() {
        return Err(Error::Range("events, labels and segments must align".into()));
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| (events[i].timestamp_ms, i));

    let mut ledger = CostLedger::default();
    let mut context: BTreeMap<(&str, EventSource), Vec<u64>> = BTreeMap::new();
    let mut examples = Vec::new();
    for i in order {
        let event = &events[i];
        let outcome = gate(event, segments[i], policy);
        ledger.account(event, &outcome);
        match event.source {
            EventSource::OrganicImpression | EventSource::NewPageImpression => {
                if let GateOutcome::Gated(g) = &outcome {
                    context.insert((event.user_id.as_str(), event.source), tokens_of(&g.event));
                }
            }
            EventSource::AdImpression => {
                let Some(label) = labels[i] else { continue };
                let mut tokens = match &outcome {
                    GateOutcome::Gated(g) => tokens_of(&g.event),
                    GateOutcome::Dropped { .. } => Vec::new(),
                };
                for source in [EventSource::OrganicImpression, EventSource::NewPageImpression] {
                    if let Some(ctx) = context.get(&(event.user_id.as_str(), source)) {
                        tokens.extend_from_slice(ctx);
                    }
                }
                examples.push(Example {
                    tokens,
                    label: label.is_positive(),
                    segment: outcome.segment(),
                });
            }
            EventSource::Conversion => {}
        }
    }
    Ok(Arm { examples, ledger })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub learner: LearnerConfig,
    pub seed: u64,
    pub replicas: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            learner: LearnerConfig::default(),
            seed: 11,
            replicas: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub ne_baseline: Option<f64>,
    pub ne_treatment: Option<f64>,
    pub ne_gain: Option<f64>,
    pub n_samples: usize,
    pub prior_p: Option<f64>,
    pub attr_volume_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NEReport {
    pub ne_baseline: f64,
    pub ne_treatment: f64,
    pub ne_gain: f64,
    pub n_samples: usize,
    pub prior_p: f64,
    /// Treatment attributes out over baseline attributes out, all sources.
    pub attr_volume_ratio: f64,
    pub source_volume_ratio: BTreeMap<EventSource, f64>,
    pub attributes_baseline: u64,
    pub attributes_treatment: u64,
    pub per_segment: BTreeMap<Segment, SegmentReport>,
    pub replicas: usize,
    pub prediction_clip: f64,
    pub gain_convention: String,
    pub ledger_baseline: CostLedger,
    pub ledger_treatment: CostLedger,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_ne(per_replica: &[Option<f64>]) -> Option<f64> {
    let defined: Option<Vec<f64>> = per_replica.iter().copied().collect();
    defined.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// NE per replica for the examples selected by `filter`.
fn replica_nes(
    arm: &Arm,
    preds: &[Vec<f64>],
    filter: impl Fn(&Example) -> bool,
) -> Result<(Vec<Option<f64>>, usize, Option<f64>)> {
    let idx: Vec<usize> = (0..arm.examples.len()).filter(|&i| filter(&arm.examples[i])).collect();
    let labels: Vec<bool> = idx.iter().map(|&i| arm.examples[i].label).collect();
    if labels.is_empty() {
        return Ok((vec![None; preds.len()], 0, None));
    }
    let prior = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
    let nes = preds
        .iter()
        .map(|p| {
            let sel: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            normalized_entropy(&labels, &sel)
        })
        .collect::<Result<_>>()?;
    Ok((nes, labels.len(), Some(prior)))
}

/// Runs both policies over the same labeled stream and averages NE over
/// `cfg.replicas` hash seeds.
pub fn compare_policies(
    events: &[Event],
    labels: &[Option<WindowLabel>],
    segments: &[Segment],
    policy_a: &GatePolicy,
    policy_b: &GatePolicy,
    cfg: &EvalConfig,
) -> Result<NEReport> {
    if cfg.replicas == 0 {
        return Err(Error::Config("replicas must be >= 1".into()));
    }
    let a = build_arm(events, labels, segments, policy_a)?;
    let b = build_arm(events, labels, segments, policy_b)?;
    let seeds: Vec<u64> = (0..cfg.replicas as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let predict = |arm: &Arm| -> Result<Vec<Vec<f64>>> {
        seeds
            .iter()
            .map(|&s| train_predict_online(&arm.examples, &cfg.learner, s))
            .collect()
    };
    let (pa, pb) = (predict(&a)?, predict(&b)?);

    let (ne_a, n, prior) = replica_nes(&a, &pa, |_| true)?;
    let (ne_b, _, _) = replica_nes(&b, &pb, |_| true)?;
    let (Some(ne_baseline), Some(ne_treatment), Some(prior_p)) = (mean_ne(&ne_a), mean_ne(&ne_b), prior) else {
        return Err(Error::Range(
            "normalized entropy undefined: targets need both positive and negative labels".into(),
        ));
    };

    let mut per_segment = BTreeMap::new();
    for seg in [Segment::Active, Segment::Passive] {
        let (sa, n_seg, prior_seg) = replica_nes(&a, &pa, |e| e.segment == seg)?;
        let (sb, _, _) = replica_nes(&b, &pb, |e| e.segment == seg)?;
        let (ma, mb) = (mean_ne(&sa), mean_ne(&sb));
        per_segment.insert(
            seg,
            SegmentReport {
                ne_baseline: ma,
                ne_treatment: mb,
                ne_gain: ma.zip(mb).map(|(x, y)| x - y),
                n_samples: n_seg,
                prior_p: prior_seg,
                attr_volume_ratio: ratio(
                    b.ledger.segment_total(seg).attributes_out,
                    a.ledger.segment_total(seg).attributes_out,
                ),
            },
        );
    }

    let source_volume_ratio = EventSource::IMPRESSIONS
        .into_iter()
        .map(|s| {
            (
                s,
                ratio(
                    b.ledger.source_total(s).attributes_out,
                    a.ledger.source_total(s).attributes_out,
                ),
            )
        })
        .collect();
    let (attrs_a, attrs_b) = (a.ledger.total().attributes_out, b.ledger.total().attributes_out);
    Ok(NEReport {
        ne_baseline,
        ne_treatment,
        ne_gain: ne_baseline - ne_treatment,
        n_samples: n,
        prior_p,
        attr_volume_ratio: ratio(attrs_b, attrs_a),
        source_volume_ratio,
        attributes_baseline: attrs_a,
        attributes_treatment: attrs_b,
        per_segment,
        replicas: cfg.replicas,
        prediction_clip: PREDICTION_CLIP,
        gain_convention: GAIN_CONVENTION.to_string(),
        ledger_baseline: a.ledger,
        ledger_treatment: b.ledger,
    })
}
