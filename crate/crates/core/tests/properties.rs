//! Property tests against independent oracles.

use std::collections::BTreeSet;

use ebfgate_core::event::{group_timelines, AttributeSchema, AD_NOISE_ATTRS};
use ebfgate_core::gate::gate_stream;
use ebfgate_core::stats::log_dwell_seconds;
use ebfgate_core::*;
use proptest::prelude::*;

fn linear_label(t: i64, conversions: &[i64], horizon: i64, buffer: i64) -> bool {
    conversions.iter().any(|&c| t - buffer <= c && c <= t + horizon)
}

/// Posterior written out as the Bayes ratio of two Gaussian densities.
fn bayes_ratio(mu1: f64, mu0: f64, sigma: f64, prior1: f64, x: f64) -> f64 {
    let density = |mu: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let joint1 = density(mu1) * prior1;
    let joint0 = density(mu0) * (1.0 - prior1);
    joint1 / (joint1 + joint0)
}

fn batch_stats(user: &str, horizon: i64, samples: &[(i64, bool)]) -> UserStats {
    let (mut n1, mut n0, mut s1, mut s0, mut q1, mut q0) = (0, 0, 0.0, 0.0, 0.0, 0.0);
    for &(d, y) in samples {
        let x = (d as f64 / 1000.0).ln();
        if y {
            n1 += 1;
            s1 += x;
            q1 += x * x;
        } else {
            n0 += 1;
            s0 += x;
            q0 += x * x;
        }
    }
    UserStats {
        user_id: user.into(),
        n1,
        n0,
        sum_logd_1: s1,
        sum_logd_0: s0,
        sumsq_logd_1: q1,
        sumsq_logd_0: q0,
        horizon_s_ms: horizon,
    }
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn assert_stats_close(got: &UserStats, want: &UserStats) {
    assert_eq!((got.n1, got.n0), (want.n1, want.n0));
    for (g, w) in [
        (got.sum_logd_1, want.sum_logd_1),
        (got.sum_logd_0, want.sum_logd_0),
        (got.sumsq_logd_1, want.sumsq_logd_1),
        (got.sumsq_logd_0, want.sumsq_logd_0),
    ] {
        assert!(rel_close(g, w), "{g} vs {w}");
    }
}

fn arb_event() -> impl Strategy<Value = Event> {
    let attrs = prop::collection::btree_map(
        "[a-z_]{1,8}",
        prop_oneof![
            any::<i64>().prop_map(AttrValue::Int),
            (-1e6f64..1e6).prop_map(AttrValue::Float),
            "[a-zA-Z0-9 ]{0,6}".prop_map(AttrValue::Str),
        ],
        0..5,
    );
    (
        "[a-z0-9]{1,6}",
        0usize..4,
        0i64..1_000_000_000,
        0i64..10_000_000,
        attrs,
        prop::sample::select(vec!["click", "like", "share"]),
    )
        .prop_map(|(user, src, t, dwell, attributes, kind)| {
            let source = EventSource::ALL[src];
            let mut e = if source == EventSource::Conversion {
                Event::conversion(user, t, kind)
            } else {
                Event::impression(user, source, t, dwell)
            };
            e.attributes = attributes;
            e
        })
}

proptest! {
    #[test]
    fn binary_search_label_matches_linear_scan(
        t in -100i64..1100,
        mut conv in prop::collection::vec(0i64..1000, 0..50),
        horizon in 1i64..300,
        buffer in 0i64..100,
    ) {
        conv.sort_unstable();
        let got = label_impression(t, &conv, horizon, buffer).unwrap().is_positive();
        prop_assert_eq!(got, linear_label(t, &conv, horizon, buffer));
    }

    #[test]
    fn unbuffered_window_is_forecast_interval(t in -1_000_000i64..1_000_000, s in 1i64..1_000_000) {
        let w = adjust_label_window(t, s, 0).unwrap();
        prop_assert_eq!((w.start_ms, w.end_ms), (t, t + s));
    }

    #[test]
    fn streaming_equals_batch(
        samples in prop::collection::vec((1i64..10_000_000, any::<bool>()), 0..200),
        cuts in prop::collection::vec(0usize..200, 0..10),
    ) {
        let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c.min(samples.len())).collect();
        bounds.push(0);
        bounds.push(samples.len());
        bounds.sort_unstable();
        let mut total = UserStats::new("u", 300_000);
        // merge chunks in reverse order to exercise commutativity too
        for w in bounds.windows(2).rev() {
            let mut chunk = UserStats::new("u", 300_000);
            for &(d, y) in &samples[w[0]..w[1]] {
                chunk.update(d, WindowLabel::from_bool(y)).unwrap();
            }
            total.merge(&chunk).unwrap();
        }
        assert_stats_close(&total, &batch_stats("u", 300_000, &samples));
    }

    #[test]
    fn merge_commutes(
        a in prop::collection::vec((1i64..10_000_000, any::<bool>()), 0..50),
        b in prop::collection::vec((1i64..10_000_000, any::<bool>()), 0..50),
    ) {
        let sa = batch_stats("u", 1, &a);
        let sb = batch_stats("u", 1, &b);
        let mut ab = sa.clone();
        ab.merge(&sb).unwrap();
        let mut ba = sb.clone();
        ba.merge(&sa).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn stats_respect_cauchy_schwarz(samples in prop::collection::vec((1i64..10_000_000, any::<bool>()), 1..100)) {
        let s = batch_stats("u", 1, &samples);
        if s.n1 > 0 {
            prop_assert!(s.sumsq_logd_1 * s.n1 as f64 >= s.sum_logd_1.powi(2) * (1.0 - 1e-12));
        }
        if s.n0 > 0 {
            prop_assert!(s.sumsq_logd_0 * s.n0 as f64 >= s.sum_logd_0.powi(2) * (1.0 - 1e-12));
        }
    }

    #[test]
    fn sigmoid_form_matches_bayes_ratio(
        mu1 in -2.0f64..3.0,
        mu0 in -2.0f64..3.0,
        sigma in 0.5f64..2.0,
        prior1 in 0.01f64..0.99,
        dwell in 1i64..3_600_000,
    ) {
        let m = DwellModel::new(mu1, mu0, sigma, prior1).unwrap();
        let oracle = bayes_ratio(mu1, mu0, sigma, prior1, log_dwell_seconds(dwell));
        prop_assert!((m.posterior(dwell).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn posterior_increases_with_dwell_when_mu1_exceeds_mu0(
        mu0 in -2.0f64..2.0,
        gap in 0.01f64..2.0,
        sigma in 0.2f64..2.0,
        prior1 in 0.01f64..0.99,
        d1 in 1i64..1_000_000,
        step in 1i64..1_000_000,
    ) {
        let m = DwellModel::new(mu0 + gap, mu0, sigma, prior1).unwrap();
        let lo = m.posterior(d1).unwrap();
        let hi = m.posterior(d1 + step).unwrap();
        prop_assert!(hi > lo || (hi == 1.0 && lo == 1.0), "{lo} !< {hi}");
    }

    #[test]
    fn event_json_round_trip(e in arb_event()) {
        let line = e.to_json_line();
        prop_assert_eq!(line.len(), e.json_len());
        let back = parse_event(&line).unwrap();
        prop_assert_eq!(&back, &e);
        prop_assert_eq!(parse_event(&back.to_json_line()).unwrap(), back);
    }

    #[test]
    fn denoise_is_idempotent(events in prop::collection::vec(arb_event(), 0..40), lo in 0i64..5000, width in 1i64..5_000_000) {
        let bounds = DenoiseBounds::new(lo, lo + width).unwrap();
        let once = denoise_dwell(&events, bounds);
        prop_assert_eq!(denoise_dwell(&once, bounds), once.clone());
        prop_assert_eq!(
            once.iter().filter(|e| !e.is_impression()).count(),
            events.iter().filter(|e| !e.is_impression()).count()
        );
    }

    #[test]
    fn timeline_is_independent_of_ingest_order(
        events in prop::collection::vec(arb_event(), 0..40),
        seed in any::<u64>(),
    ) {
        // distinct timestamps: ties keep ingest order, which a shuffle changes
        let mut events = events;
        for (i, e) in events.iter_mut().enumerate() {
            e.timestamp_ms = e.timestamp_ms * 64 + i as i64;
        }
        let mut shuffled = events.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let mut sorted = events.clone();
        sorted.sort_by_key(|e| e.timestamp_ms);
        prop_assert_eq!(group_timelines(&shuffled), group_timelines(&sorted));
        for (user, tl) in group_timelines(&events) {
            prop_assert_eq!(UserTimeline::build(&user, &shuffled), tl);
        }
    }

    #[test]
    fn fraction_control_on_distinct_values(
        values in prop::collection::btree_set(0u32..1_000_000, 1..300),
        target in 0.05f64..0.95,
    ) {
        let corr: Vec<f64> = values.iter().enumerate()
            .map(|(i, &v)| if i % 2 == 0 { v as f64 / 1e4 } else { -(v as f64) / 1e4 })
            .collect();
        let cal = calibrate_epsilon(&corr, target).unwrap();
        prop_assert!((cal.achieved_active_fraction - target).abs() <= 1.0 / corr.len() as f64 + 1e-9);
        let active = corr.iter().filter(|c| assign_segment(Some(**c), cal.epsilon) == Segment::Active).count();
        prop_assert!((active as f64 / corr.len() as f64 - cal.achieved_active_fraction).abs() < 1e-12);
    }

    #[test]
    fn raising_epsilon_never_activates(corr in -5.0f64..5.0, eps in 0.0f64..5.0, bump in 0.0f64..5.0) {
        if assign_segment(Some(corr), eps) == Segment::Passive {
            prop_assert_eq!(assign_segment(Some(corr), eps + bump), Segment::Passive);
        }
    }

    #[test]
    fn gating_never_leaks_removed_attributes(
        events in prop::collection::vec(arb_event(), 0..40),
        active_mask in any::<u64>(),
    ) {
        let schema = AttributeSchema::default();
        let mut policy = GatePolicy::default();
        let removed: BTreeSet<String> = AD_NOISE_ATTRS.iter().map(|s| s.to_string()).collect();
        policy.removals.entry(Segment::Active).or_default().insert(EventSource::AdImpression, removed.clone());
        policy.validate(&schema).unwrap();
        let mut events = events;
        for (i, e) in events.iter_mut().enumerate() {
            if e.source == EventSource::AdImpression && i % 3 == 0 {
                e.attributes.insert("attr_09".into(), AttrValue::Int(1));
            }
        }
        let segment_of = |i: usize| if active_mask >> (i % 64) & 1 == 1 { Segment::Active } else { Segment::Passive };
        let mut idx = 0;
        let (outcomes, _) = gate_stream(&events, &policy, |_| { idx += 1; segment_of(idx - 1) });
        for (i, out) in outcomes.iter().enumerate() {
            let g = out.gated().unwrap();
            prop_assert_eq!(out, &gate(&events[i], segment_of(i), &policy));
            if g.segment == Segment::Active && g.event.source == EventSource::AdImpression {
                prop_assert!(g.event.attributes.keys().all(|k| !removed.contains(k)));
            }
        }
    }

    #[test]
    fn identity_policy_is_byte_identical(events in prop::collection::vec(arb_event(), 0..40)) {
        let (outcomes, ledger) = gate_stream(&events, &GatePolicy::default(), |_| Segment::Active);
        for (e, out) in events.iter().zip(&outcomes) {
            let line = out.gated().unwrap().to_json_line();
            let stripped = line.strip_suffix(",\"segment\":\"active\"}").map(|s| format!("{s}}}"));
            prop_assert_eq!(stripped, Some(e.to_json_line()));
        }
        let t = ledger.total();
        prop_assert_eq!((t.events_in, t.attributes_in, t.bytes_in), (t.events_out, t.attributes_out, t.bytes_out));
    }
}

#[test]
fn ledgers_merge_like_one_pass() {
    let schema = AttributeSchema::default();
    let profiles = ebfgate_core::sim::profiles_from_mix(6, Default::default(), Default::default()).unwrap();
    let out = Simulator::default().generate(&profiles, 3_600_000, 5).unwrap();
    let mut policy = GatePolicy::default();
    policy.removals.entry(Segment::Passive).or_default().insert(
        EventSource::AdImpression,
        AD_NOISE_ATTRS.iter().map(|s| s.to_string()).collect(),
    );
    policy.validate(&schema).unwrap();
    let seg = |e: &Event| {
        if e.user_id.as_str() < "u000003" {
            Segment::Active
        } else {
            Segment::Passive
        }
    };
    let (_, whole) = gate_stream(&out.events, &policy, seg);
    let mid = out.events.len() / 2;
    let (_, mut left) = gate_stream(&out.events[..mid], &policy, seg);
    let (_, right) = gate_stream(&out.events[mid..], &policy, seg);
    left.merge(&right);
    assert_eq!(left, whole);
}
