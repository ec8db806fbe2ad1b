//! Active/passive segmentation from the absolute dwell/conversion correlation,
//! with the threshold recalibrated every epoch from the population quantile.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::event::{group_timelines, DenoiseBounds, Event};
use crate::stats::{label_ad_impressions, CorrelationNormalization, StatsConfig, UserStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Active,
    Passive,
    Unknown,
}

impl Segment {
    /// Cold-start users are gated like passive ones.
    pub fn for_gating(self) -> Segment {
        match self {
            Segment::Unknown => Segment::Passive,
            s => s,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Active => "active",
            Segment::Passive => "passive",
            Segment::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAssignment {
    pub user_id: String,
    pub epoch: i64,
    pub segment: Segment,
    pub corr_value: Option<f64>,
}

/// JSON has no infinity; an unset threshold is written as `null`.
mod epsilon_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCalibration {
    pub epoch: i64,
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub target_active_fraction: f64,
    pub achieved_active_fraction: f64,
    pub population_size: usize,
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!(
            "target_active_fraction must lie in (0, 1), got {target}"
        )));
    }
    Ok(())
}

/// Picks epsilon as the `(1 - target)` quantile of `|corr|`, so that roughly a
/// `target` fraction of users lie strictly above it. Ties at epsilon are passive.
pub fn calibrate_epsilon(corr_values: &[f64], target_active_fraction: f64) -> Result<EpochCalibration> {
    check_target(target_active_fraction)?;
    let mut abs: Vec<f64> = corr_values.iter().map(|c| c.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let epsilon = if n == 0 {
        f64::INFINITY
    } else {
        // tolerance keeps e.g. (1 - 2/3) * 3 from rounding up to 2
        let passive = (((1.0 - target_active_fraction) * n as f64) - 1e-9).ceil().max(0.0) as usize;
        if passive == 0 {
            0.0
        } else {
            abs[passive.min(n) - 1]
        }
    };
    Ok(calibration_for(&abs, epsilon, target_active_fraction))
}

fn calibration_for(abs: &[f64], epsilon: f64, target: f64) -> EpochCalibration {
    let active = abs.iter().filter(|&&a| a > epsilon).count();
    EpochCalibration {
        epoch: 0,
        epsilon,
        target_active_fraction: target,
        achieved_active_fraction: if abs.is_empty() {
            0.0
        } else {
            active as f64 / abs.len() as f64
        },
        population_size: abs.len(),
    }
}

pub fn assign_segment(corr_value: Option<f64>, epsilon: f64) -> Segment {
    match corr_value {
        None => Segment::Unknown,
        Some(c) if c.abs() > epsilon => Segment::Active,
        Some(_) => Segment::Passive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub target_active_fraction: f64,
    /// Overrides quantile calibration when set.
    pub fixed_epsilon: Option<f64>,
    pub n_min: u64,
    pub normalization: CorrelationNormalization,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            target_active_fraction: 0.6667,
            fixed_epsilon: None,
            n_min: 20,
            normalization: CorrelationNormalization::Raw,
        }
    }
}

/// Calibrates epsilon on one snapshot and assigns every user in it, in snapshot order.
pub fn run_epoch(
    snapshot: &[UserStats],
    cfg: &SegmenterConfig,
    epoch: i64,
) -> Result<(EpochCalibration, Vec<SegmentAssignment>)> {
    check_target(cfg.target_active_fraction)?;
    let corr: Vec<Option<f64>> = snapshot
        .iter()
        .map(|s| s.correlation(cfg.n_min, cfg.normalization))
        .collect();
    let defined: Vec<f64> = corr.iter().flatten().copied().collect();
    let mut calibration = match cfg.fixed_epsilon {
        Some(eps) if eps >= 0.0 => {
            let abs: Vec<f64> = defined.iter().map(|c| c.abs()).collect();
            calibration_for(&abs, eps, cfg.target_active_fraction)
        }
        Some(eps) => return Err(Error::Config(format!("fixed_epsilon must be >= 0, got {eps}"))),
        None => calibrate_epsilon(&defined, cfg.target_active_fraction)?,
    };
    calibration.epoch = epoch;
    let assignments = snapshot
        .iter()
        .zip(corr)
        .map(|(s, c)| SegmentAssignment {
            user_id: s.user_id.clone(),
            epoch,
            segment: assign_segment(c, calibration.epsilon),
            corr_value: c,
        })
        .collect();
    Ok((calibration, assignments))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Each epoch sees all history up to its boundary.
    #[default]
    Cumulative,
    /// Each epoch sees only impressions that matured during it.
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub stats: StatsConfig,
    pub segmenter: SegmenterConfig,
    pub denoise: DenoiseBounds,
    pub epoch_ms: i64,
    pub stats_mode: StatsMode,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            stats: StatsConfig::default(),
            segmenter: SegmenterConfig::default(),
            denoise: DenoiseBounds::default(),
            epoch_ms: 6 * 3_600_000,
            stats_mode: StatsMode::Cumulative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub calibration: EpochCalibration,
    pub assignments: Vec<SegmentAssignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationRun {
    pub epochs: Vec<EpochResult>,
    /// Cumulative statistics over the whole stream, one per user.
    pub final_stats: Vec<UserStats>,
}

impl SegmentationRun {
    pub fn table(&self) -> SegmentTable {
        SegmentTable::from_assignments(self.epochs.iter().flat_map(|e| e.assignments.iter().cloned()))
    }
}

/// Replays a stream epoch by epoch, wall-clock aligned (`epoch = t / epoch_ms`).
///
/// Ad impressions are denoised and labeled with the buffered window. An
/// impression enters the statistics once its forecast horizon has closed
/// before an epoch boundary; the final epoch flushes whatever remains.
pub fn segment_stream(events: &[Event], cfg: &SegmentationConfig) -> Result<SegmentationRun> {
    if cfg.epoch_ms <= 0 {
        return Err(Error::Config(format!(
            "epoch_ms must be positive, got {}",
            cfg.epoch_ms
        )));
    }
    check_target(cfg.segmenter.target_active_fraction)?;
    let clean: Vec<Event> = events.iter().filter(|e| cfg.denoise.keeps(e)).cloned().collect();
    let Some((t_min, t_max)) = clean
        .iter()
        .map(|e| e.timestamp_ms)
        .fold(None, |acc: Option<(i64, i64)>, t| {
            Some(acc.map_or((t, t), |(lo, hi)| (lo.min(t), hi.max(t))))
        })
    else {
        return Ok(SegmentationRun {
            epochs: Vec::new(),
            final_stats: Vec::new(),
        });
    };
    let first = t_min / cfg.epoch_ms;
    let last = t_max / cfg.epoch_ms;
    let n_epochs = (last - first + 1) as usize;
    let horizon = cfg.stats.horizon_ms;

    struct UserEpochs {
        first_seen: usize,
        per_epoch: Vec<UserStats>,
    }
    let mut users = Vec::new();
    for timeline in group_timelines(&clean).into_values() {
        let seen = timeline
            .impressions
            .first()
            .map(|e| e.timestamp_ms)
            .into_iter()
            .chain(timeline.conversions.first().copied())
            .min()
            .expect("grouped timelines are non-empty");
        let mut per_epoch = vec![UserStats::new(&timeline.user_id, horizon); n_epochs];
        for (i, label) in label_ad_impressions(&timeline, horizon, cfg.stats.buffer_ms)? {
            let event = &timeline.impressions[i];
            let Some(dwell) = event.dwell_ms.filter(|&d| d > 0) else {
                continue;
            };
            let matured = ((event.timestamp_ms + horizon) / cfg.epoch_ms).min(last);
            per_epoch[(matured - first) as usize].update(dwell, label)?;
        }
        users.push(UserEpochs {
            first_seen: (seen / cfg.epoch_ms - first) as usize,
            per_epoch,
        });
    }

    let mut running: Vec<UserStats> = users
        .iter()
        .map(|u| UserStats::new(&u.per_epoch[0].user_id, horizon))
        .collect();
    let mut epochs = Vec::with_capacity(n_epochs);
    for k in 0..n_epochs {
        let mut snapshot = Vec::new();
        for (u, acc) in users.iter().zip(running.iter_mut()) {
            acc.merge(&u.per_epoch[k])?;
            if u.first_seen > k {
                continue;
            }
            snapshot.push(match cfg.stats_mode {
                StatsMode::Cumulative => acc.clone(),
                StatsMode::Sliding => u.per_epoch[k].clone(),
            });
        }
        let (calibration, assignments) = run_epoch(&snapshot, &cfg.segmenter, first + k as i64)?;
        epochs.push(EpochResult {
            calibration,
            assignments,
        });
    }
    Ok(SegmentationRun {
        epochs,
        final_stats: running,
    })
}

/// Published segment assignments, looked up by user and epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentTable {
    by_user: BTreeMap<String, BTreeMap<i64, Segment>>,
}

impl SegmentTable {
    pub fn from_assignments(assignments: impl IntoIterator<Item = SegmentAssignment>) -> Self {
        let mut by_user: BTreeMap<String, BTreeMap<i64, Segment>> = BTreeMap::new();
        for a in assignments {
            by_user.entry(a.user_id).or_default().insert(a.epoch, a.segment);
        }
        SegmentTable { by_user }
    }

    pub fn len(&self) -> usize {
        self.by_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    /// Most recent assignment; users never assigned are `Unknown`.
    pub fn latest(&self, user_id: &str) -> Segment {
        self.by_user
            .get(user_id)
            .and_then(|m| m.values().next_back().copied())
            .unwrap_or(Segment::Unknown)
    }

    /// The assignment published before `epoch` began (i.e. from an earlier epoch).
    pub fn as_of(&self, user_id: &str, epoch: i64) -> Segment {
        self.by_user
            .get(user_id)
            .and_then(|m| m.range(..epoch).next_back().map(|(_, s)| *s))
            .unwrap_or(Segment::Unknown)
    }
}

pub fn write_assignments<'a, W: Write>(
    mut writer: W,
    assignments: impl IntoIterator<Item = &'a SegmentAssignment>,
) -> Result<()> {
    for a in assignments {
        writeln!(writer, "{}", serde_json::to_string(a).expect("assignment serialize"))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_assignments<R: BufRead>(reader: R) -> Result<Vec<SegmentAssignment>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::WindowLabel;

    #[test]
    fn calibrate_two_thirds_of_three() {
        let cal = calibrate_epsilon(&[0.1, -0.2, 0.3], 2.0 / 3.0).unwrap();
        assert_eq!(cal.epsilon, 0.1);
        assert!((cal.achieved_active_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cal.population_size, 3);
        let cal = calibrate_epsilon(&[0.1, 0.2, 0.3], 0.6667).unwrap();
        assert_eq!(cal.epsilon, 0.1);
    }

    #[test]
    fn calibrate_ties_go_passive() {
        let cal = calibrate_epsilon(&[0.4; 6], 0.5).unwrap();
        assert_eq!(cal.epsilon, 0.4);
        assert_eq!(cal.achieved_active_fraction, 0.0);
        let cal = calibrate_epsilon(&[0.5], 0.5).unwrap();
        assert_eq!(cal.epsilon, 0.5);
        assert_eq!(cal.achieved_active_fraction, 0.0);
    }

    #[test]
    fn calibrate_empty_population() {
        let cal = calibrate_epsilon(&[], 0.6667).unwrap();
        assert!(cal.epsilon.is_infinite());
        assert_eq!(cal.achieved_active_fraction, 0.0);
        assert_eq!(cal.population_size, 0);
        assert!(calibrate_epsilon(&[1.0], 1.0).is_err());
        assert!(calibrate_epsilon(&[1.0], 0.0).is_err());
    }

    #[test]
    fn assign_uses_absolute_value() {
        assert_eq!(assign_segment(Some(-0.8), 0.3), Segment::Active);
        assert_eq!(assign_segment(Some(0.0), 0.0), Segment::Passive);
        assert_eq!(assign_segment(Some(0.3), 0.3), Segment::Passive);
        assert_eq!(assign_segment(None, 0.3), Segment::Unknown);
    }

    fn stats_with_corr(user: &str, corr: f64) -> UserStats {
        let mut s = UserStats::new(user, 300_000);
        let base = 2000.0f64;
        for i in 0..25 {
            let jitter = 1.0 + 0.01 * i as f64;
            s.update((base * jitter * corr.exp()).round() as i64, WindowLabel::Positive)
                .unwrap();
            s.update((base * jitter).round() as i64, WindowLabel::Negative).unwrap();
        }
        s
    }

    #[test]
    fn run_epoch_three_regimes() {
        let snap = vec![
            stats_with_corr("a", 0.7),
            stats_with_corr("b", 0.01),
            stats_with_corr("c", -0.6),
        ];
        let cfg = SegmenterConfig {
            target_active_fraction: 2.0 / 3.0,
            ..Default::default()
        };
        let (cal, out) = run_epoch(&snap, &cfg, 4).unwrap();
        let segs: Vec<Segment> = out.iter().map(|a| a.segment).collect();
        assert_eq!(segs, vec![Segment::Active, Segment::Passive, Segment::Active]);
        assert_eq!(cal.epoch, 4);
        assert!(out.iter().all(|a| a.epoch == 4));
        assert_eq!(run_epoch(&snap, &cfg, 4).unwrap(), (cal, out));
    }

    #[test]
    fn run_epoch_cold_start() {
        let snap = vec![UserStats::new("a", 1), UserStats::new("b", 1)];
        let (cal, out) = run_epoch(&snap, &SegmenterConfig::default(), 0).unwrap();
        assert!(cal.epsilon.is_infinite());
        assert!(out.iter().all(|a| a.segment == Segment::Unknown));
        let table = SegmentTable::from_assignments(out);
        assert_eq!(table.latest("a").for_gating(), Segment::Passive);
        assert_eq!(table.latest("zzz"), Segment::Unknown);
    }

    #[test]
    fn fixed_epsilon_override() {
        let snap = vec![stats_with_corr("a", 0.7), stats_with_corr("b", 0.2)];
        let cfg = SegmenterConfig {
            fixed_epsilon: Some(0.5),
            ..Default::default()
        };
        let (cal, out) = run_epoch(&snap, &cfg, 0).unwrap();
        assert_eq!(cal.epsilon, 0.5);
        assert_eq!(out[0].segment, Segment::Active);
        assert_eq!(out[1].segment, Segment::Passive);
    }

    #[test]
    fn calibration_json_uses_null_for_unset_threshold() {
        let cal = calibrate_epsilon(&[], 0.5).unwrap();
        let json = serde_json::to_string(&cal).unwrap();
        assert!(json.contains("\"epsilon\":null"), "{json}");
        let back: EpochCalibration = serde_json::from_str(&json).unwrap();
        assert!(back.epsilon.is_infinite());
    }

    #[test]
    fn table_lookups() {
        let mk = |e, s| SegmentAssignment {
            user_id: "u".into(),
            epoch: e,
            segment: s,
            corr_value: None,
        };
        let t = SegmentTable::from_assignments([mk(1, Segment::Passive), mk(2, Segment::Active)]);
        assert_eq!(t.latest("u"), Segment::Active);
        assert_eq!(t.as_of("u", 1), Segment::Unknown);
        assert_eq!(t.as_of("u", 2), Segment::Passive);
        assert_eq!(t.as_of("u", 9), Segment::Active);
    }

    #[test]
    fn empty_stream_has_no_epochs() {
        let run = segment_stream(&[], &SegmentationConfig::default()).unwrap();
        assert!(run.epochs.is_empty());
        assert!(run.table().is_empty());
    }
}
