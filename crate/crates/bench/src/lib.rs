//! Shared fixtures for the criterion benches under `benches/`.

use ebfgate_core::event::AD_NOISE_ATTRS;
use ebfgate_core::sim::{profiles_from_mix, RegimeMix};
use ebfgate_core::{Event, EventSource, GatePolicy, Segment, Simulator};

/// A default-mix stream of `users` users over `hours` hours.
pub fn stream(users: usize, hours: i64, seed: u64) -> Vec<Event> {
    let profiles = profiles_from_mix(users, RegimeMix::default(), Default::default()).expect("valid mix");
    Simulator::default()
        .generate(&profiles, hours * 3_600_000, seed)
        .expect("valid simulation")
        .events
}

/// Removes the noise ad attributes and boosts every source for active users.
pub fn mixed_policy() -> GatePolicy {
    let mut p = GatePolicy::default();
    p.removals.entry(Segment::Active).or_default().insert(
        EventSource::AdImpression,
        AD_NOISE_ATTRS.iter().map(|s| s.to_string()).collect(),
    );
    let boosts = p.boosts.entry(Segment::Active).or_default();
    boosts.insert(EventSource::AdImpression, ["ad_boost".to_string()].into());
    boosts.insert(EventSource::OrganicImpression, ["organic_boost".to_string()].into());
    boosts.insert(EventSource::NewPageImpression, ["page_boost".to_string()].into());
    p
}
