//! Event-based feature (EBF) records: schema, JSONL ingestion, dwell denoising
//! and the buffered label window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    OrganicImpression,
    AdImpression,
    NewPageImpression,
    Conversion,
}

impl EventSource {
    pub const ALL: [EventSource; 4] = [
        EventSource::OrganicImpression,
        EventSource::AdImpression,
        EventSource::NewPageImpression,
        EventSource::Conversion,
    ];

    pub const IMPRESSIONS: [EventSource; 3] = [
        EventSource::OrganicImpression,
        EventSource::AdImpression,
        EventSource::NewPageImpression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventSource::OrganicImpression => "organic_impression",
            EventSource::AdImpression => "ad_impression",
            EventSource::NewPageImpression => "new_page_impression",
            EventSource::Conversion => "conversion",
        }
    }

    pub fn is_impression(self) -> bool {
        self != EventSource::Conversion
    }
}

impl fmt::Display for EventSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventSource::ALL
            .into_iter()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| Error::Schema {
                line: 0,
                message: format!("unknown event source {s:?}"),
            })
    }
}

/// Scalar attribute value. Integers are tried before floats so `3` stays an integer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Float(v) => write!(f, "{v}"),
            AttrValue::Str(v) => f.write_str(v),
        }
    }
}

pub type Attributes = BTreeMap<String, AttrValue>;

/// One timestamped EBF record.
///
/// Impressions carry `dwell_ms`; conversions carry `conversion_kind`. The
/// `extended` map holds boost-only attributes that the baseline model never
/// sees unless a gate policy admits them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: String,
    pub source: EventSource,
    pub timestamp_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_ms: Option<i64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: Attributes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion_kind: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extended: Attributes,
}

impl Event {
    pub fn impression(user_id: impl Into<String>, source: EventSource, timestamp_ms: i64, dwell_ms: i64) -> Self {
        Event {
            user_id: user_id.into(),
            source,
            timestamp_ms,
            dwell_ms: Some(dwell_ms),
            attributes: Attributes::new(),
            conversion_kind: None,
            extended: Attributes::new(),
        }
    }

    pub fn conversion(user_id: impl Into<String>, timestamp_ms: i64, kind: impl Into<String>) -> Self {
        Event {
            user_id: user_id.into(),
            source: EventSource::Conversion,
            timestamp_ms,
            dwell_ms: None,
            attributes: Attributes::new(),
            conversion_kind: Some(kind.into()),
            extended: Attributes::new(),
        }
    }

    pub fn is_impression(&self) -> bool {
        self.source.is_impression()
    }

    /// Checks the cross-field invariants that serde alone cannot express.
    pub fn validate(&self) -> Result<()> {
        let schema = |message: String| Error::Schema { line: 0, message };
        if self.user_id.is_empty() {
            return Err(schema("user_id must be non-empty".into()));
        }
        if self.timestamp_ms < 0 {
            return Err(Error::Range(format!("timestamp_ms {} is negative", self.timestamp_ms)));
        }
        if self.is_impression() {
            match self.dwell_ms {
                None => return Err(schema(format!("dwell_ms required for {}", self.source))),
                Some(d) if d < 0 => return Err(Error::Range(format!("dwell_ms {d} is negative"))),
                Some(_) => {}
            }
            if self.conversion_kind.is_some() {
                return Err(schema(format!("conversion_kind not allowed on {}", self.source)));
            }
        } else {
            if self.dwell_ms.is_some() {
                return Err(schema("dwell_ms not allowed on conversion".into()));
            }
            if self.conversion_kind.is_none() {
                return Err(schema("conversion_kind required for conversion".into()));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }

    /// Length in bytes of [`Event::to_json_line`], without building the string.
    pub fn json_len(&self) -> usize {
        struct Count(usize);
        impl Write for Count {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0 += buf.len();
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let mut count = Count(0);
        serde_json::to_writer(&mut count, self).expect("event serialization is infallible");
        count.0
    }
}

const EVENT_FIELDS: [&str; 7] = [
    "user_id",
    "source",
    "timestamp_ms",
    "dwell_ms",
    "attributes",
    "conversion_kind",
    "extended",
];

/// Parses one JSONL record into a validated [`Event`].
pub fn parse_event(line: &str) -> Result<Event> {
    parse_event_counting(line).map(|(event, _)| event)
}

/// Like [`parse_event`] but also reports how many unknown top-level fields were ignored.
pub fn parse_event_counting(line: &str) -> Result<(Event, usize)> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(Error::Schema {
            line: 0,
            message: "record is not a JSON object".into(),
        });
    };
    let unknown: Vec<String> = obj
        .keys()
        .filter(|k| !EVENT_FIELDS.contains(&k.as_str()))
        .cloned()
        .collect();
    for key in &unknown {
        obj.remove(key);
    }
    check_mandatory(&obj)?;
    let event: Event = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Schema {
        line: 0,
        message: e.to_string(),
    })?;
    event.validate()?;
    Ok((event, unknown.len()))
}

fn check_mandatory(obj: &Map<String, Value>) -> Result<()> {
    for key in ["user_id", "source", "timestamp_ms"] {
        if !obj.contains_key(key) {
            return Err(Error::Schema {
                line: 0,
                message: format!("missing mandatory field {key}"),
            });
        }
    }
    if let Some(Value::String(s)) = obj.get("source") {
        s.parse::<EventSource>()?;
    }
    // Negative integers would otherwise surface as serde type errors.
    for key in ["timestamp_ms", "dwell_ms"] {
        if let Some(v) = obj.get(key).and_then(Value::as_i64) {
            if v < 0 {
                return Err(Error::Range(format!("{key} {v} is negative")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records: usize,
    pub blank_lines: usize,
    pub unknown_fields: usize,
}

/// Reads a JSONL event stream, failing on the first invalid record with its line number.
pub fn read_events<R: BufRead>(reader: R) -> Result<(Vec<Event>, IngestStats)> {
    let mut events = Vec::new();
    let mut stats = IngestStats::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            stats.blank_lines += 1;
            continue;
        }
        let (event, unknown) = parse_event_counting(&line).map_err(|e| match e {
            Error::Range(msg) => Error::Range(format!("line {}: {msg}", idx + 1)),
            other => other.at_line(idx + 1),
        })?;
        stats.records += 1;
        stats.unknown_fields += unknown;
        events.push(event);
    }
    Ok((events, stats))
}

pub fn write_events<'a, W: Write>(mut writer: W, events: impl IntoIterator<Item = &'a Event>) -> Result<()> {
    for event in events {
        writeln!(writer, "{}", event.to_json_line())?;
    }
    writer.flush()?;
    Ok(())
}

/// Inclusive dwell bounds for impression denoising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseBounds {
    pub min_dwell_ms: i64,
    pub max_dwell_ms: i64,
}

impl Default for DenoiseBounds {
    fn default() -> Self {
        DenoiseBounds {
            min_dwell_ms: 250,
            max_dwell_ms: 1_800_000,
        }
    }
}

impl DenoiseBounds {
    pub fn new(min_dwell_ms: i64, max_dwell_ms: i64) -> Result<Self> {
        if min_dwell_ms >= max_dwell_ms {
            return Err(Error::Config(format!(
                "denoise bounds must satisfy min < max, got [{min_dwell_ms}, {max_dwell_ms}]"
            )));
        }
        Ok(DenoiseBounds {
            min_dwell_ms,
            max_dwell_ms,
        })
    }

    /// Conversions always pass; impressions pass when their dwell lies within the bounds.
    pub fn keeps(&self, event: &Event) -> bool {
        match event.dwell_ms {
            Some(d) if event.is_impression() => (self.min_dwell_ms..=self.max_dwell_ms).contains(&d),
            _ => !event.is_impression(),
        }
    }
}

/// Drops impressions with implausible dwell times. Order is preserved.
pub fn denoise_dwell(events: &[Event], bounds: DenoiseBounds) -> Vec<Event> {
    events.iter().filter(|e| bounds.keeps(e)).cloned().collect()
}

/// Closed interval of conversion timestamps that make an impression positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelWindow {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl LabelWindow {
    pub fn contains(&self, t_ms: i64) -> bool {
        self.start_ms <= t_ms && t_ms <= self.end_ms
    }
}

/// The label interval `[t - buffer, t + horizon]`; the backward buffer absorbs
/// impressions that were logged after their conversion.
pub fn adjust_label_window(t_ms: i64, horizon_ms: i64, buffer_ms: i64) -> Result<LabelWindow> {
    if horizon_ms <= 0 {
        return Err(Error::Config(format!("horizon must be positive, got {horizon_ms} ms")));
    }
    if buffer_ms < 0 {
        return Err(Error::Config(format!(
            "buffer must be non-negative, got {buffer_ms} ms"
        )));
    }
    Ok(LabelWindow {
        start_ms: t_ms - buffer_ms,
        end_ms: t_ms + horizon_ms,
    })
}

/// Time-sorted impressions and conversion timestamps for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTimeline {
    pub user_id: String,
    pub impressions: Vec<Event>,
    pub conversions: Vec<i64>,
}

impl UserTimeline {
    pub fn new(user_id: impl Into<String>) -> Self {
        UserTimeline {
            user_id: user_id.into(),
            impressions: Vec::new(),
            conversions: Vec::new(),
        }
    }

    /// Events belonging to other users are ignored.
    pub fn build<'a>(user_id: &str, events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut timeline = UserTimeline::new(user_id);
        for event in events.into_iter().filter(|e| e.user_id == user_id) {
            timeline.push(event.clone());
        }
        timeline.finish();
        timeline
    }

    fn push(&mut self, event: Event) {
        if event.is_impression() {
            self.impressions.push(event);
        } else {
            self.conversions.push(event.timestamp_ms);
        }
    }

    // sort_by_key is stable, so ties keep ingest order
    fn finish(&mut self) {
        self.impressions.sort_by_key(|e| e.timestamp_ms);
        self.conversions.sort_unstable();
    }
}

/// Groups a stream into per-user timelines, keyed and iterated by user id.
pub fn group_timelines(events: &[Event]) -> BTreeMap<String, UserTimeline> {
    let mut map: BTreeMap<String, UserTimeline> = BTreeMap::new();
    for event in events {
        map.entry(event.user_id.clone())
            .or_insert_with(|| UserTimeline::new(event.user_id.clone()))
            .push(event.clone());
    }
    for timeline in map.values_mut() {
        timeline.finish();
    }
    map
}

/// Sorted conversion timestamps per user, borrowed from the stream.
pub fn conversion_index(events: &[Event]) -> BTreeMap<&str, Vec<i64>> {
    let mut map: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for e in events.iter().filter(|e| !e.is_impression()) {
        map.entry(e.user_id.as_str()).or_default().push(e.timestamp_ms);
    }
    for v in map.values_mut() {
        v.sort_unstable();
    }
    map
}

/// Base and extended (boost-only) attribute names for one source.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSchema {
    #[serde(default)]
    pub base: Vec<String>,
    #[serde(default)]
    pub extended: Vec<String>,
}

/// Attribute schema per event source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSchema {
    pub sources: BTreeMap<EventSource, SourceSchema>,
}

/// Number of ad-impression attributes in the default schema.
pub const AD_BASE_ATTRS: usize = 11;
/// The last four default ad-impression attributes carry no signal.
pub const AD_NOISE_ATTRS: [&str; 4] = ["attr_08", "attr_09", "attr_10", "attr_11"];

impl Default for AttributeSchema {
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let ad_base = (1..=AD_BASE_ATTRS).map(|i| format!("attr_{i:02}")).collect();
        let mut sources = BTreeMap::new();
        sources.insert(
            EventSource::AdImpression,
            SourceSchema {
                base: ad_base,
                extended: names(&["ad_boost"]),
            },
        );
        sources.insert(
            EventSource::OrganicImpression,
            SourceSchema {
                base: names(&["content_id", "media_type", "position"]),
                extended: names(&["organic_boost"]),
            },
        );
        sources.insert(
            EventSource::NewPageImpression,
            SourceSchema {
                base: names(&["media_type", "semantic_id"]),
                extended: names(&["page_boost"]),
            },
        );
        sources.insert(EventSource::Conversion, SourceSchema::default());
        AttributeSchema { sources }
    }
}

impl AttributeSchema {
    pub fn source(&self, source: EventSource) -> Option<&SourceSchema> {
        self.sources.get(&source)
    }

    pub fn base_set(&self, source: EventSource) -> BTreeSet<&str> {
        self.source(source)
            .map(|s| s.base.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn extended_set(&self, source: EventSource) -> BTreeSet<&str> {
        self.source(source)
            .map(|s| s.extended.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Base attributes of the event must match the configured base schema exactly.
    pub fn check_event(&self, event: &Event) -> Result<()> {
        let Some(schema) = self.source(event.source) else {
            return Ok(());
        };
        let have: BTreeSet<&str> = event.attributes.keys().map(String::as_str).collect();
        let want: BTreeSet<&str> = schema.base.iter().map(String::as_str).collect();
        if have != want {
            let missing: Vec<_> = want.difference(&have).collect();
            let extra: Vec<_> = have.difference(&want).collect();
            return Err(Error::Schema {
                line: 0,
                message: format!(
                    "{} attributes do not match schema (missing {missing:?}, unexpected {extra:?})",
                    event.source
                ),
            });
        }
        Ok(())
    }
}
