//! Synthetic multi-user EBF streams with known ground truth.
//!
//! Conversions and impressions arrive as independent Poisson processes. An
//! impression's log-dwell (log-seconds) is drawn from `N(mu0 + delta, sigma)`
//! when a conversion follows within the forecast horizon and `N(mu0, sigma)`
//! otherwise, where `delta` depends on the user's regime at that time.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};
use crate::event::{AttrValue, Event, EventSource, AD_BASE_ATTRS};

const HOUR_MS: f64 = 3_600_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Positive,
    Low,
    Negative,
}

/// `mu1 - mu0` per regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeDeltas {
    pub positive: f64,
    pub low: f64,
    pub negative: f64,
}

impl Default for RegimeDeltas {
    fn default() -> Self {
        RegimeDeltas {
            positive: 0.7,
            low: 0.0,
            negative: -0.7,
        }
    }
}

impl RegimeDeltas {
    pub fn get(&self, regime: Regime) -> f64 {
        match regime {
            Regime::Positive => self.positive,
            Regime::Low => self.low,
            Regime::Negative => self.negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeChange {
    pub start_ms: i64,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub regime_schedule: Vec<RegimeChange>,
    pub mu0: f64,
    #[serde(default)]
    pub delta: RegimeDeltas,
    pub sigma: f64,
    /// Expected conversions per hour.
    pub conversion_rate: f64,
    /// Expected impressions per hour.
    pub impression_rate: f64,
    pub informative_boost_attrs: bool,
}

impl UserProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("profile {}: {m}", self.user_id)));
        if self.user_id.is_empty() {
            return Err(Error::Config("profile with empty user_id".into()));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.conversion_rate > 0.0 && self.impression_rate > 0.0) {
            return bad("rates must be positive".into());
        }
        if self.regime_schedule.is_empty() {
            return bad("regime_schedule is empty".into());
        }
        if self.regime_schedule.windows(2).any(|w| w[0].start_ms > w[1].start_ms) {
            return bad("regime_schedule must be sorted by start_ms".into());
        }
        Ok(())
    }

    /// Regime in force at `t_ms`; before the first change the first regime applies.
    pub fn regime_at(&self, t_ms: i64) -> Regime {
        let idx = self.regime_schedule.partition_point(|c| c.start_ms <= t_ms);
        self.regime_schedule[idx.saturating_sub(1)].regime
    }
}

/// Shared parameters for profiles built from a regime mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileTemplate {
    pub mu0: f64,
    pub delta: RegimeDeltas,
    pub sigma: f64,
    pub conversion_rate: f64,
    pub impression_rate: f64,
}

impl Default for ProfileTemplate {
    fn default() -> Self {
        ProfileTemplate {
            mu0: 3f64.ln(),
            delta: RegimeDeltas::default(),
            sigma: 0.5,
            conversion_rate: 2.0,
            impression_rate: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeMix {
    pub positive: f64,
    pub low: f64,
    pub negative: f64,
}

impl Default for RegimeMix {
    fn default() -> Self {
        RegimeMix {
            positive: 1.0 / 3.0,
            low: 1.0 / 3.0,
            negative: 1.0 / 3.0,
        }
    }
}

pub fn user_id(index: usize) -> String {
    format!("u{index:06}")
}

/// Builds `n_users` single-regime profiles. Regimes are laid out in
/// contiguous blocks proportional to the mix, so counts are exact up to rounding.
/// Users in the low regime carry uninformative boost attributes.
pub fn profiles_from_mix(n_users: usize, mix: RegimeMix, template: ProfileTemplate) -> Result<Vec<UserProfile>> {
    let total = mix.positive + mix.low + mix.negative;
    if !(total > 0.0) || mix.positive < 0.0 || mix.low < 0.0 || mix.negative < 0.0 {
        return Err(Error::Config(
            "regime mix must be non-negative with a positive sum".into(),
        ));
    }
    let cut_pos = mix.positive / total;
    let cut_low = cut_pos + mix.low / total;
    Ok((0..n_users)
        .map(|i| {
            let u = (i as f64 + 0.5) / n_users as f64;
            let regime = if u < cut_pos {
                Regime::Positive
            } else if u < cut_low {
                Regime::Low
            } else {
                Regime::Negative
            };
            UserProfile {
                user_id: user_id(i),
                regime_schedule: vec![RegimeChange { start_ms: 0, regime }],
                mu0: template.mu0,
                delta: template.delta,
                sigma: template.sigma,
                conversion_rate: template.conversion_rate,
                impression_rate: template.impression_rate,
                informative_boost_attrs: regime != Regime::Low,
            }
        })
        .collect())
}

/// Impression source shares; they need not sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMix {
    pub ad_impression: f64,
    pub organic_impression: f64,
    pub new_page_impression: f64,
}

impl Default for SourceMix {
    fn default() -> Self {
        SourceMix {
            ad_impression: 0.6,
            organic_impression: 0.3,
            new_page_impression: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub horizon_ms: i64,
    pub source_mix: SourceMix,
    /// Probability a signal-bearing base ad attribute equals the true label.
    pub base_signal_agreement: f64,
    /// Probability an informative boost attribute equals the true label.
    pub boost_signal_agreement: f64,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator {
            horizon_ms: 300_000,
            source_mix: SourceMix::default(),
            base_signal_agreement: 0.55,
            boost_signal_agreement: 0.9,
        }
    }
}

/// Truth for one generated impression; `event_index` points into the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionTruth {
    pub event_index: usize,
    pub user_id: String,
    pub source: EventSource,
    pub timestamp_ms: i64,
    pub label: u8,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub horizon_ms: i64,
    pub seed: u64,
    pub profiles: Vec<UserProfile>,
    pub impressions: Vec<ImpressionTruth>,
}

impl GroundTruth {
    pub fn profile(&self, user_id: &str) -> Option<&UserProfile> {
        self.profiles.iter().find(|p| p.user_id == user_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub events: Vec<Event>,
    pub truth: GroundTruth,
}

/// Per-user RNG seed derived from the run seed and the user id.
pub fn user_seed(seed: u64, user_id: &str) -> u64 {
    xxh3_64_with_seed(user_id.as_bytes(), seed)
}

fn poisson_times(rng: &mut ChaCha8Rng, per_hour: f64, duration_ms: i64) -> Vec<i64> {
    let gap = Exp::new(per_hour / HOUR_MS).expect("positive rate");
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t >= duration_ms as f64 {
            return out;
        }
        out.push(t as i64);
    }
}

fn noisy_label(rng: &mut ChaCha8Rng, label: bool, agreement: f64) -> i64 {
    let keep = rng.random::<f64>() < agreement;
    i64::from(label == keep)
}

// (timestamp, user rank, per-user sequence) orders the merged stream deterministically
type OrderKey = (i64, usize, usize);
type Tagged = (OrderKey, Event, Option<(bool, Regime)>);

const CONVERSION_KINDS: [&str; 4] = ["click", "like", "share", "comment"];
const MEDIA_TYPES: [&str; 3] = ["image", "text", "video"];

impl Simulator {
    pub fn generate(&self, profiles: &[UserProfile], duration_ms: i64, seed: u64) -> Result<SimOutput> {
        if duration_ms <= 0 {
            return Err(Error::Config(format!(
                "duration must be positive, got {duration_ms} ms"
            )));
        }
        if self.horizon_ms <= 0 {
            return Err(Error::Config("simulator horizon must be positive".into()));
        }
        let mix = self.source_mix;
        let mix_total = mix.ad_impression + mix.organic_impression + mix.new_page_impression;
        if !(mix_total > 0.0) {
            return Err(Error::Config("source mix must have a positive sum".into()));
        }
        let mut tagged: Vec<Tagged> = Vec::new();
        for (rank, profile) in profiles.iter().enumerate() {
            profile.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(user_seed(seed, &profile.user_id));
            let conversions = poisson_times(&mut rng, profile.conversion_rate, duration_ms);
            let impressions = poisson_times(&mut rng, profile.impression_rate, duration_ms);
            let mut seq = 0;
            for &t in &conversions {
                let kind = CONVERSION_KINDS[rng.random_range(0..CONVERSION_KINDS.len())];
                tagged.push(((t, rank, seq), Event::conversion(&profile.user_id, t, kind), None));
                seq += 1;
            }
            for &t in &impressions {
                let next = conversions.partition_point(|&c| c < t);
                let label = conversions.get(next).is_some_and(|&c| c - t <= self.horizon_ms);
                let regime = profile.regime_at(t);
                let mean = profile.mu0 + if label { profile.delta.get(regime) } else { 0.0 };
                let log_dwell = Normal::new(mean, profile.sigma)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng);
                let dwell_ms = ((log_dwell.exp() * 1000.0).round() as i64).max(1);
                let pick = rng.random::<f64>() * mix_total;
                let source = if pick < mix.ad_impression {
                    EventSource::AdImpression
                } else if pick < mix.ad_impression + mix.organic_impression {
                    EventSource::OrganicImpression
                } else {
                    EventSource::NewPageImpression
                };
                let mut event = Event::impression(&profile.user_id, source, t, dwell_ms);
                self.fill_attributes(&mut rng, &mut event, log_dwell, label, profile.informative_boost_attrs);
                tagged.push(((t, rank, seq), event, Some((label, regime))));
                seq += 1;
            }
        }
        tagged.sort_by_key(|(key, _, _)| *key);

        let mut events = Vec::with_capacity(tagged.len());
        let mut truth = Vec::new();
        for (idx, (_, event, info)) in tagged.into_iter().enumerate() {
            if let Some((label, regime)) = info {
                truth.push(ImpressionTruth {
                    event_index: idx,
                    user_id: event.user_id.clone(),
                    source: event.source,
                    timestamp_ms: event.timestamp_ms,
                    label: u8::from(label),
                    regime,
                });
            }
            events.push(event);
        }
        Ok(SimOutput {
            events,
            truth: GroundTruth {
                horizon_ms: self.horizon_ms,
                seed,
                profiles: profiles.to_vec(),
                impressions: truth,
            },
        })
    }

    fn fill_attributes(&self, rng: &mut ChaCha8Rng, event: &mut Event, log_dwell: f64, label: bool, informative: bool) {
        let attrs = &mut event.attributes;
        let boost = if informative {
            noisy_label(rng, label, self.boost_signal_agreement)
        } else {
            rng.random_range(0..2)
        };
        match event.source {
            EventSource::AdImpression => {
                attrs.insert("attr_01".into(), AttrValue::Int((log_dwell * 2.0).floor() as i64));
                for i in 2..=7 {
                    let v = noisy_label(rng, label, self.base_signal_agreement);
                    attrs.insert(format!("attr_{i:02}"), AttrValue::Int(v));
                }
                for i in 8..=AD_BASE_ATTRS {
                    attrs.insert(format!("attr_{i:02}"), AttrValue::Int(rng.random_range(0..8)));
                }
                event.extended.insert("ad_boost".into(), AttrValue::Int(boost));
            }
            EventSource::OrganicImpression => {
                attrs.insert(
                    "content_id".into(),
                    AttrValue::Str(format!("c{}", rng.random_range(0..1000))),
                );
                attrs.insert(
                    "media_type".into(),
                    AttrValue::Str(MEDIA_TYPES[rng.random_range(0..3)].into()),
                );
                attrs.insert("position".into(), AttrValue::Int(rng.random_range(1..=50)));
                event.extended.insert("organic_boost".into(), AttrValue::Int(boost));
            }
            EventSource::NewPageImpression => {
                attrs.insert(
                    "media_type".into(),
                    AttrValue::Str(MEDIA_TYPES[rng.random_range(0..3)].into()),
                );
                attrs.insert(
                    "semantic_id".into(),
                    AttrValue::Str(format!("s{}", rng.random_range(0..100))),
                );
                event.extended.insert("page_boost".into(), AttrValue::Int(boost));
            }
            EventSource::Conversion => {}
        }
    }
}

/// Record of which impressions had their dwell replaced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionLog {
    pub outlier_indices: Vec<usize>,
    pub delays_ms: BTreeMap<usize, i64>,
}

/// Shifts impression timestamps forward by `Uniform[0, delay_max_ms]` and
/// replaces the dwell of an `outlier_rate` share of impressions with a value
/// from 1-10 ms or 2-8 h (equally likely). Stream order is kept.
pub fn inject_logging_artifacts(
    events: &[Event],
    delay_max_ms: i64,
    outlier_rate: f64,
    seed: u64,
) -> Result<(Vec<Event>, InjectionLog)> {
    if delay_max_ms < 0 {
        return Err(Error::Config(format!("delay_max_ms must be >= 0, got {delay_max_ms}")));
    }
    if !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::Config(format!(
            "outlier_rate must lie in [0, 1), got {outlier_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = InjectionLog::default();
    let mut out = events.to_vec();
    for (idx, event) in out.iter_mut().enumerate().filter(|(_, e)| e.is_impression()) {
        if delay_max_ms > 0 {
            let delay = rng.random_range(0..=delay_max_ms);
            event.timestamp_ms += delay;
            log.delays_ms.insert(idx, delay);
        }
        if outlier_rate > 0.0 && rng.random::<f64>() < outlier_rate {
            let dwell = if rng.random::<bool>() {
                rng.random_range(1..=10)
            } else {
                rng.random_range(7_200_000..=28_800_000)
            };
            event.dwell_ms = Some(dwell);
            log.outlier_indices.push(idx);
        }
    }
    Ok((out, log))
}

/// Optional regime file for the `generate` command: explicit profiles win
/// over a mix-based population.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeSpec {
    pub mix: RegimeMix,
    pub template: ProfileTemplate,
    pub profiles: Vec<UserProfile>,
}

impl RegimeSpec {
    pub fn profiles(&self, n_users: usize) -> Result<Vec<UserProfile>> {
        if self.profiles.is_empty() {
            profiles_from_mix(n_users, self.mix, self.template)
        } else {
            self.profiles.iter().try_for_each(UserProfile::validate)?;
            Ok(self.profiles.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_profile(regime: Regime) -> Vec<UserProfile> {
        let mut p = profiles_from_mix(1, RegimeMix::default(), ProfileTemplate::default()).unwrap();
        p[0].regime_schedule = vec![RegimeChange { start_ms: 0, regime }];
        p
    }

    #[test]
    fn mix_layout_is_exact() {
        let p = profiles_from_mix(9, RegimeMix::default(), ProfileTemplate::default()).unwrap();
        let count = |r| p.iter().filter(|x| x.regime_at(0) == r).count();
        assert_eq!(
            (count(Regime::Positive), count(Regime::Low), count(Regime::Negative)),
            (3, 3, 3)
        );
        assert!(p
            .iter()
            .all(|x| x.informative_boost_attrs == (x.regime_at(0) != Regime::Low)));
    }

    #[test]
    fn regime_lookup_follows_schedule() {
        let mut p = one_profile(Regime::Positive).remove(0);
        p.regime_schedule.push(RegimeChange {
            start_ms: 1000,
            regime: Regime::Negative,
        });
        assert_eq!(p.regime_at(0), Regime::Positive);
        assert_eq!(p.regime_at(999), Regime::Positive);
        assert_eq!(p.regime_at(1000), Regime::Negative);
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let profiles = profiles_from_mix(5, RegimeMix::default(), ProfileTemplate::default()).unwrap();
        let sim = Simulator::default();
        let a = sim.generate(&profiles, 3_600_000, 42).unwrap();
        let b = sim.generate(&profiles, 3_600_000, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.events.windows(2).all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
        assert!(a.events.iter().all(|e| e.validate().is_ok()));
        let c = sim.generate(&profiles, 3_600_000, 43).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn truth_labels_match_window_definition() {
        let profiles = one_profile(Regime::Positive);
        let out = Simulator::default().generate(&profiles, 10 * 3_600_000, 1).unwrap();
        let conv: Vec<i64> = out
            .events
            .iter()
            .filter(|e| !e.is_impression())
            .map(|e| e.timestamp_ms)
            .collect();
        for t in &out.truth.impressions {
            let expect = conv
                .iter()
                .any(|&c| c >= t.timestamp_ms && c - t.timestamp_ms <= 300_000);
            assert_eq!(t.label == 1, expect);
            assert_eq!(out.events[t.event_index].timestamp_ms, t.timestamp_ms);
        }
    }

    #[test]
    fn ad_impressions_carry_schema() {
        let out = Simulator::default()
            .generate(&one_profile(Regime::Low), 3_600_000, 3)
            .unwrap();
        let schema = crate::event::AttributeSchema::default();
        for e in out.events.iter().filter(|e| e.is_impression()) {
            schema.check_event(e).unwrap();
            assert_eq!(e.extended.len(), 1);
        }
    }

    #[test]
    fn injection_off_is_identity() {
        let out = Simulator::default()
            .generate(&one_profile(Regime::Low), 3_600_000, 3)
            .unwrap();
        let (same, log) = inject_logging_artifacts(&out.events, 0, 0.0, 9).unwrap();
        assert_eq!(same, out.events);
        assert_eq!(log, InjectionLog::default());
        assert!(inject_logging_artifacts(&out.events, -1, 0.0, 9).is_err());
        assert!(inject_logging_artifacts(&out.events, 0, 1.0, 9).is_err());
    }

    #[test]
    fn injected_delays_are_bounded_and_forward() {
        let out = Simulator::default()
            .generate(&one_profile(Regime::Low), 3_600_000, 3)
            .unwrap();
        let (late, log) = inject_logging_artifacts(&out.events, 60_000, 0.0, 9).unwrap();
        for (i, (a, b)) in out.events.iter().zip(&late).enumerate() {
            let d = b.timestamp_ms - a.timestamp_ms;
            assert!((0..=60_000).contains(&d));
            if a.is_impression() {
                assert_eq!(log.delays_ms[&i], d);
            } else {
                assert_eq!(d, 0);
            }
        }
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = one_profile(Regime::Low);
        p[0].sigma = 0.0;
        assert!(Simulator::default().generate(&p, 1000, 0).is_err());
        assert!(Simulator::default().generate(&one_profile(Regime::Low), 0, 0).is_err());
    }
}
