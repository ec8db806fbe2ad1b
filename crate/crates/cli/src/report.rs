use std::collections::BTreeMap;
use std::fmt::Write;

use ebfgate_core::eval::GAIN_CONVENTION;
use ebfgate_core::stats::log_dwell_seconds;
use ebfgate_core::{Error, Event, EventSource, NEReport, Segment, WindowLabel};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// One row per report, shaped like an NE-gain / volume results table.
pub fn render_table(rows: &[(String, NEReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>9} {:>9} {:>8} {:>9} {:>9} {:>9} {:>9}",
        "experiment", "NE base", "NE treat", "NE gain", "attr vol", "ad vol", "gain act", "gain pas"
    );
    for (name, r) in rows {
        let seg_gain = |seg| r.per_segment.get(&seg).and_then(|x| x.ne_gain);
        let _ = writeln!(
            s,
            "{:<28} {:>9.4} {:>9.4} {:>+8.4} {:>9.4} {:>9.4} {:>9} {:>9}",
            name,
            r.ne_baseline,
            r.ne_treatment,
            r.ne_gain,
            r.attr_volume_ratio,
            r.source_volume_ratio
                .get(&EventSource::AdImpression)
                .copied()
                .unwrap_or(1.0),
            opt(seg_gain(Segment::Active)),
            opt(seg_gain(Segment::Passive)),
        );
    }
    let _ = writeln!(s, "{GAIN_CONVENTION}; volumes are treatment/baseline attribute counts");
    s
}

/// Log-dwell histogram of labeled ad impressions, split by label.
pub fn dwell_histogram_csv(events: &[Event], labels: &[Option<WindowLabel>], bin_width: f64) -> Result<String, Error> {
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let mut bins: BTreeMap<i64, [u64; 2]> = BTreeMap::new();
    for (event, label) in events.iter().zip(labels) {
        let (Some(label), Some(dwell)) = (label, event.dwell_ms.filter(|&d| d > 0)) else {
            continue;
        };
        let bin = (log_dwell_seconds(dwell) / bin_width).floor() as i64;
        bins.entry(bin).or_default()[usize::from(label.is_positive())] += 1;
    }
    let mut s = String::from("log_dwell_lo,log_dwell_hi,label0,label1\n");
    for (bin, [n0, n1]) in bins {
        let lo = bin as f64 * bin_width;
        let _ = writeln!(s, "{lo:.4},{:.4},{n0},{n1}", lo + bin_width);
    }
    Ok(s)
}
