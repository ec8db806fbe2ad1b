//! Segment-conditional attribute removal, boosting and source filtering, with
//! a mergeable cost ledger used as the throughput proxy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{AttributeSchema, Event, EventSource};
use crate::segment::Segment;

pub type AttrRules = BTreeMap<Segment, BTreeMap<EventSource, BTreeSet<String>>>;

/// Declarative gating rules. Absent entries mean "no change"; a segment
/// missing from `source_allowlist` admits every source.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatePolicy {
    #[serde(default)]
    pub removals: AttrRules,
    #[serde(default)]
    pub boosts: AttrRules,
    #[serde(default)]
    pub source_allowlist: BTreeMap<Segment, BTreeSet<EventSource>>,
}

fn rule(rules: &AttrRules, segment: Segment, source: EventSource) -> Option<&BTreeSet<String>> {
    rules.get(&segment).and_then(|m| m.get(&source))
}

impl GatePolicy {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("policy: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("policy: {e}")))
    }

    pub fn is_identity(&self) -> bool {
        self.removals.values().all(|m| m.values().all(BTreeSet::is_empty))
            && self.boosts.values().all(|m| m.values().all(BTreeSet::is_empty))
            && self.source_allowlist.is_empty()
    }

    /// Rejects rules that name attributes outside the schema, target the
    /// cold-start segment, or both remove and boost the same attribute.
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let segments = self
            .removals
            .keys()
            .chain(self.boosts.keys())
            .chain(self.source_allowlist.keys());
        for seg in segments {
            if *seg == Segment::Unknown {
                return Err(Error::Config(
                    "policy cannot target the unknown segment; cold-start users follow passive rules".into(),
                ));
            }
        }
        for (seg, by_source) in &self.removals {
            for (source, names) in by_source {
                let base = schema.base_set(*source);
                if let Some(bad) = names.iter().find(|n| !base.contains(n.as_str())) {
                    return Err(Error::Config(format!(
                        "removal of unknown attribute {bad:?} for {seg}/{source}"
                    )));
                }
            }
        }
        for (seg, by_source) in &self.boosts {
            for (source, names) in by_source {
                let extended = schema.extended_set(*source);
                if let Some(bad) = names.iter().find(|n| !extended.contains(n.as_str())) {
                    return Err(Error::Config(format!(
                        "boost of unknown attribute {bad:?} for {seg}/{source}"
                    )));
                }
                if let Some(removed) = rule(&self.removals, *seg, *source) {
                    if let Some(both) = names.intersection(removed).next() {
                        return Err(Error::Config(format!(
                            "attribute {both:?} is both removed and boosted for {seg}/{source}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn admits(&self, segment: Segment, source: EventSource) -> bool {
        self.source_allowlist
            .get(&segment.for_gating())
            .is_none_or(|allowed| allowed.contains(&source))
    }

    pub fn removals_for(&self, segment: Segment, source: EventSource) -> Option<&BTreeSet<String>> {
        rule(&self.removals, segment.for_gating(), source)
    }

    pub fn boosts_for(&self, segment: Segment, source: EventSource) -> Option<&BTreeSet<String>> {
        rule(&self.boosts, segment.for_gating(), source)
    }
}

/// An event after gating, annotated with the segment whose rules applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedEvent {
    #[serde(flatten)]
    pub event: Event,
    pub segment: Segment,
}

impl GatedEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("gated event serialization is infallible")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateOutcome {
    Gated(GatedEvent),
    Dropped { segment: Segment },
}

impl GateOutcome {
    pub fn segment(&self) -> Segment {
        match self {
            GateOutcome::Gated(g) => g.segment,
            GateOutcome::Dropped { segment } => *segment,
        }
    }

    pub fn gated(&self) -> Option<&GatedEvent> {
        match self {
            GateOutcome::Gated(g) => Some(g),
            GateOutcome::Dropped { .. } => None,
        }
    }
}

/// Applies `policy` to one event: `(attributes - removals) + admitted boosts`,
/// or drops it when its source is not allowlisted for the segment.
pub fn gate(event: &Event, segment: Segment, policy: &GatePolicy) -> GateOutcome {
    let segment = segment.for_gating();
    if !policy.admits(segment, event.source) {
        return GateOutcome::Dropped { segment };
    }
    let mut out = event.clone();
    if let Some(removed) = policy.removals_for(segment, event.source) {
        out.attributes.retain(|name, _| !removed.contains(name));
    }
    if let Some(boosted) = policy.boosts_for(segment, event.source) {
        for name in boosted {
            if let Some(v) = event.extended.get(name) {
                out.attributes.insert(name.clone(), v.clone());
            }
        }
    }
    GateOutcome::Gated(GatedEvent { event: out, segment })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub events_in: u64,
    pub events_out: u64,
    pub attributes_in: u64,
    pub attributes_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl Counters {
    fn add(&mut self, other: &Counters) {
        self.events_in += other.events_in;
        self.events_out += other.events_out;
        self.attributes_in += other.attributes_in;
        self.attributes_out += other.attributes_out;
        self.bytes_in += other.bytes_in;
        self.bytes_out += other.bytes_out;
    }

    /// `attributes_out / attributes_in`, or 1 when nothing came in.
    pub fn attribute_ratio(&self) -> f64 {
        if self.attributes_in == 0 {
            1.0
        } else {
            self.attributes_out as f64 / self.attributes_in as f64
        }
    }
}

/// Volume counters per (gating segment, source).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostLedger {
    pub cells: BTreeMap<Segment, BTreeMap<EventSource, Counters>>,
}

impl CostLedger {
    /// Bytes are measured on the event body without the segment annotation.
    pub fn account(&mut self, before: &Event, after: &GateOutcome) {
        let cell = self
            .cells
            .entry(after.segment())
            .or_default()
            .entry(before.source)
            .or_default();
        cell.events_in += 1;
        cell.attributes_in += before.attributes.len() as u64;
        cell.bytes_in += before.json_len() as u64 + 1;
        if let GateOutcome::Gated(g) = after {
            cell.events_out += 1;
            cell.attributes_out += g.event.attributes.len() as u64;
            cell.bytes_out += g.event.json_len() as u64 + 1;
        }
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (seg, by_source) in &other.cells {
            for (source, counters) in by_source {
                self.cells
                    .entry(*seg)
                    .or_default()
                    .entry(*source)
                    .or_default()
                    .add(counters);
            }
        }
    }

    pub fn cell(&self, segment: Segment, source: EventSource) -> Counters {
        self.cells
            .get(&segment)
            .and_then(|m| m.get(&source))
            .copied()
            .unwrap_or_default()
    }

    pub fn source_total(&self, source: EventSource) -> Counters {
        let mut total = Counters::default();
        for by_source in self.cells.values() {
            if let Some(c) = by_source.get(&source) {
                total.add(c);
            }
        }
        total
    }

    pub fn segment_total(&self, segment: Segment) -> Counters {
        let mut total = Counters::default();
        if let Some(by_source) = self.cells.get(&segment) {
            by_source.values().for_each(|c| total.add(c));
        }
        total
    }

    pub fn total(&self) -> Counters {
        let mut total = Counters::default();
        for by_source in self.cells.values() {
            by_source.values().for_each(|c| total.add(c));
        }
        total
    }

    /// Fraction of `source` events per gating segment, by events seen.
    pub fn segment_mix(&self, source: EventSource) -> BTreeMap<Segment, f64> {
        let total = self.source_total(source).events_in;
        self.cells
            .iter()
            .filter_map(|(seg, m)| m.get(&source).map(|c| (*seg, c.events_in)))
            .map(|(seg, n)| (seg, if total == 0 { 0.0 } else { n as f64 / total as f64 }))
            .collect()
    }
}

/// Gates a whole stream with a per-event segment lookup, returning outcomes
/// in input order plus the ledger.
pub fn gate_stream<'a, F>(events: &'a [Event], policy: &GatePolicy, mut segment_of: F) -> (Vec<GateOutcome>, CostLedger)
where
    F: FnMut(&'a Event) -> Segment,
{
    let mut ledger = CostLedger::default();
    let outcomes = events
        .iter()
        .map(|e| {
            let outcome = gate(e, segment_of(e), policy);
            ledger.account(e, &outcome);
            outcome
        })
        .collect();
    (outcomes, ledger)
}

/// Analytic attribute-volume reduction for one source under a segment mix,
/// assuming every event carries its full base schema and every boost
/// attribute. Negative values mean the policy adds volume.
pub fn expected_reduction(
    policy: &GatePolicy,
    segment_mix: &BTreeMap<Segment, f64>,
    schema: &AttributeSchema,
    source: EventSource,
) -> Result<f64> {
    let sum: f64 = segment_mix.values().sum();
    if (sum - 1.0).abs() > 1e-6 || segment_mix.values().any(|&f| f < 0.0) {
        return Err(Error::Config(format!(
            "segment mix must be a distribution, sums to {sum}"
        )));
    }
    let base = schema.base_set(source).len();
    if base == 0 {
        return Ok(0.0);
    }
    let mut reduction = 0.0;
    for (&segment, &fraction) in segment_mix {
        let per_segment = if !policy.admits(segment, source) {
            1.0
        } else {
            let removed = policy.removals_for(segment, source).map_or(0, BTreeSet::len);
            let boosted = policy.boosts_for(segment, source).map_or(0, BTreeSet::len);
            (removed as f64 - boosted as f64) / base as f64
        };
        reduction += fraction * per_segment;
    }
    Ok(reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{AttrValue, AD_NOISE_ATTRS};

    fn ad_event() -> Event {
        let mut e = Event::impression("u", EventSource::AdImpression, 10, 2000);
        for i in 1..=11 {
            e.attributes.insert(format!("attr_{i:02}"), AttrValue::Int(i));
        }
        e.extended.insert("ad_boost".into(), AttrValue::Int(1));
        e
    }

    fn noise_removal_policy() -> GatePolicy {
        let mut p = GatePolicy::default();
        p.removals.entry(Segment::Active).or_default().insert(
            EventSource::AdImpression,
            AD_NOISE_ATTRS.iter().map(|s| s.to_string()).collect(),
        );
        p
    }

    #[test]
    fn removes_four_of_eleven_for_active() {
        let p = noise_removal_policy();
        p.validate(&AttributeSchema::default()).unwrap();
        let out = gate(&ad_event(), Segment::Active, &p);
        let g = out.gated().unwrap();
        assert_eq!(g.event.attributes.len(), 7);
        assert!(AD_NOISE_ATTRS.iter().all(|n| !g.event.attributes.contains_key(*n)));
        let passive = gate(&ad_event(), Segment::Passive, &p);
        assert_eq!(passive.gated().unwrap().event.attributes.len(), 11);
    }

    #[test]
    fn allowlist_drops_new_page_for_passive() {
        let mut p = GatePolicy::default();
        p.source_allowlist.insert(
            Segment::Passive,
            [EventSource::OrganicImpression, EventSource::AdImpression].into(),
        );
        let e = Event::impression("u", EventSource::NewPageImpression, 1, 500);
        assert_eq!(
            gate(&e, Segment::Passive, &p),
            GateOutcome::Dropped {
                segment: Segment::Passive
            }
        );
        // cold-start users get passive rules
        assert_eq!(
            gate(&e, Segment::Unknown, &p),
            GateOutcome::Dropped {
                segment: Segment::Passive
            }
        );
        assert!(gate(&e, Segment::Active, &p).gated().is_some());
    }

    #[test]
    fn empty_policy_is_identity() {
        let e = ad_event();
        let out = gate(&e, Segment::Active, &GatePolicy::default());
        assert_eq!(out.gated().unwrap().event, e);
        let mut ledger = CostLedger::default();
        ledger.account(&e, &out);
        let c = ledger.cell(Segment::Active, EventSource::AdImpression);
        assert_eq!(
            (c.events_in, c.attributes_in, c.bytes_in),
            (c.events_out, c.attributes_out, c.bytes_out)
        );
    }

    #[test]
    fn boost_admits_extended_attribute() {
        let mut p = GatePolicy::default();
        p.boosts
            .entry(Segment::Active)
            .or_default()
            .insert(EventSource::AdImpression, ["ad_boost".to_string()].into());
        p.validate(&AttributeSchema::default()).unwrap();
        let g = gate(&ad_event(), Segment::Active, &p);
        assert_eq!(g.gated().unwrap().event.attributes.len(), 12);
        assert_eq!(
            gate(&ad_event(), Segment::Passive, &p)
                .gated()
                .unwrap()
                .event
                .attributes
                .len(),
            11
        );
    }

    #[test]
    fn ledger_counts_hundred_impressions() {
        let p = noise_removal_policy();
        let events = vec![ad_event(); 100];
        let (_, ledger) = gate_stream(&events, &p, |_| Segment::Active);
        let c = ledger.cell(Segment::Active, EventSource::AdImpression);
        assert_eq!(c.attributes_in, 1100);
        assert_eq!(c.attributes_out, 700);
        assert_eq!(c.events_out, 100);
    }

    #[test]
    fn dropped_event_leaves_out_counters() {
        let mut p = GatePolicy::default();
        p.source_allowlist.insert(Segment::Active, BTreeSet::new());
        let mut ledger = CostLedger::default();
        let e = ad_event();
        ledger.account(&e, &gate(&e, Segment::Active, &p));
        let c = ledger.total();
        assert_eq!((c.events_in, c.events_out, c.attributes_out, c.bytes_out), (1, 0, 0, 0));
    }

    #[test]
    fn validation_names_the_offending_attribute() {
        let mut p = GatePolicy::default();
        p.removals
            .entry(Segment::Active)
            .or_default()
            .insert(EventSource::AdImpression, ["attr_99".to_string()].into());
        let err = p.validate(&AttributeSchema::default()).unwrap_err().to_string();
        assert!(err.contains("attr_99"), "{err}");

        let mut p = GatePolicy::default();
        p.boosts
            .entry(Segment::Passive)
            .or_default()
            .insert(EventSource::AdImpression, ["attr_01".to_string()].into());
        assert!(p.validate(&AttributeSchema::default()).is_err());

        let mut p = GatePolicy::default();
        p.source_allowlist.insert(Segment::Unknown, BTreeSet::new());
        assert!(p.validate(&AttributeSchema::default()).is_err());
    }

    #[test]
    fn expected_reduction_examples() {
        let schema = AttributeSchema::default();
        let mix: BTreeMap<Segment, f64> = [(Segment::Active, 2.0 / 3.0), (Segment::Passive, 1.0 / 3.0)].into();
        let r = expected_reduction(&noise_removal_policy(), &mix, &schema, EventSource::AdImpression).unwrap();
        assert!((r - 8.0 / 33.0).abs() < 1e-12);
        assert!((r - 0.2424).abs() < 1e-4);
        assert_eq!(
            expected_reduction(&GatePolicy::default(), &mix, &schema, EventSource::AdImpression).unwrap(),
            0.0
        );
        let mut all = GatePolicy::default();
        for seg in [Segment::Active, Segment::Passive] {
            all.removals.entry(seg).or_default().insert(
                EventSource::AdImpression,
                schema
                    .source(EventSource::AdImpression)
                    .unwrap()
                    .base
                    .iter()
                    .cloned()
                    .collect(),
            );
        }
        assert_eq!(
            expected_reduction(&all, &mix, &schema, EventSource::AdImpression).unwrap(),
            1.0
        );
        let bad: BTreeMap<Segment, f64> = [(Segment::Active, 0.5)].into();
        assert!(expected_reduction(&all, &bad, &schema, EventSource::AdImpression).is_err());
    }

    #[test]
    fn policy_parses_from_toml() {
        let p = GatePolicy::from_toml(
            r#"
[removals.active]
ad_impression = ["attr_08", "attr_09", "attr_10", "attr_11"]

[boosts.active]
ad_impression = ["ad_boost"]
organic_impression = ["organic_boost"]

[source_allowlist]
passive = ["organic_impression", "ad_impression", "conversion"]
"#,
        )
        .unwrap();
        p.validate(&AttributeSchema::default()).unwrap();
        assert_eq!(
            p.removals_for(Segment::Active, EventSource::AdImpression)
                .unwrap()
                .len(),
            4
        );
        assert!(!p.admits(Segment::Passive, EventSource::NewPageImpression));
        assert!(GatePolicy::from_toml("[bogus]\nx = 1").is_err());
    }
}
