//! Per-user sufficient statistics of log-dwell conditioned on the windowed
//! conversion label, the dwell/conversion correlation statistic, and the
//! equal-variance Gaussian discriminant built from them.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{adjust_label_window, EventSource, UserTimeline};

/// Whether a conversion fell inside an impression's (buffered) label window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WindowLabel {
    Negative,
    Positive,
}

impl WindowLabel {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            WindowLabel::Positive
        } else {
            WindowLabel::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == WindowLabel::Positive
    }

    pub fn as_f64(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

/// Labels an impression at `t_ms` against ascending `conversions`.
///
/// Positive iff some conversion `c` satisfies `t - buffer <= c <= t + horizon`.
pub fn label_impression(t_ms: i64, conversions: &[i64], horizon_ms: i64, buffer_ms: i64) -> Result<WindowLabel> {
    let window = adjust_label_window(t_ms, horizon_ms, buffer_ms)?;
    let first = conversions.partition_point(|&c| c < window.start_ms);
    Ok(WindowLabel::from_bool(
        conversions.get(first).is_some_and(|&c| c <= window.end_ms),
    ))
}

/// Dwell in milliseconds to natural-log seconds.
pub fn log_dwell_seconds(dwell_ms: i64) -> f64 {
    (dwell_ms as f64 / 1000.0).ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationNormalization {
    /// Plain difference of conditional means.
    #[default]
    Raw,
    /// Mean difference divided by the pooled standard deviation.
    SNormalized,
}

/// Streaming sufficient statistics for one user under one forecast horizon.
///
/// Mergeable: `merge` is associative and commutative up to float rounding in the sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub user_id: String,
    pub n1: u64,
    pub n0: u64,
    pub sum_logd_1: f64,
    pub sum_logd_0: f64,
    pub sumsq_logd_1: f64,
    pub sumsq_logd_0: f64,
    pub horizon_s_ms: i64,
}

impl UserStats {
    pub fn new(user_id: impl Into<String>, horizon_s_ms: i64) -> Self {
        UserStats {
            user_id: user_id.into(),
            n1: 0,
            n0: 0,
            sum_logd_1: 0.0,
            sum_logd_0: 0.0,
            sumsq_logd_1: 0.0,
            sumsq_logd_0: 0.0,
            horizon_s_ms,
        }
    }

    pub fn update(&mut self, dwell_ms: i64, label: WindowLabel) -> Result<()> {
        if dwell_ms <= 0 {
            return Err(Error::Range(format!("dwell_ms must be positive, got {dwell_ms}")));
        }
        let x = log_dwell_seconds(dwell_ms);
        match label {
            WindowLabel::Positive => {
                self.n1 += 1;
                self.sum_logd_1 += x;
                self.sumsq_logd_1 += x * x;
            }
            WindowLabel::Negative => {
                self.n0 += 1;
                self.sum_logd_0 += x;
                self.sumsq_logd_0 += x * x;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &UserStats) -> Result<()> {
        if self.user_id != other.user_id || self.horizon_s_ms != other.horizon_s_ms {
            return Err(Error::Config(format!(
                "cannot merge stats for ({}, {} ms) with ({}, {} ms)",
                self.user_id, self.horizon_s_ms, other.user_id, other.horizon_s_ms
            )));
        }
        self.n1 += other.n1;
        self.n0 += other.n0;
        self.sum_logd_1 += other.sum_logd_1;
        self.sum_logd_0 += other.sum_logd_0;
        self.sumsq_logd_1 += other.sumsq_logd_1;
        self.sumsq_logd_0 += other.sumsq_logd_0;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.n1 + self.n0
    }

    pub fn mean1(&self) -> Option<f64> {
        (self.n1 > 0).then(|| self.sum_logd_1 / self.n1 as f64)
    }

    pub fn mean0(&self) -> Option<f64> {
        (self.n0 > 0).then(|| self.sum_logd_0 / self.n0 as f64)
    }

    /// Bessel-corrected per-class variances pooled with weights `n - 1`.
    pub fn pooled_variance(&self) -> Option<f64> {
        if self.total() < 3 || self.n1 == 0 || self.n0 == 0 {
            return None;
        }
        let centered = |n: u64, sum: f64, sumsq: f64| (sumsq - sum * sum / n as f64).max(0.0);
        let ss = centered(self.n1, self.sum_logd_1, self.sumsq_logd_1)
            + centered(self.n0, self.sum_logd_0, self.sumsq_logd_0);
        Some(ss / (self.total() - 2) as f64)
    }

    fn has_support(&self, n_min: u64) -> bool {
        self.n1 >= n_min.max(1) && self.n0 >= n_min.max(1)
    }

    /// Mean log-dwell near conversions minus mean log-dwell away from them.
    /// `None` until both classes hold at least `n_min` impressions.
    pub fn correlation(&self, n_min: u64, normalization: CorrelationNormalization) -> Option<f64> {
        if !self.has_support(n_min) {
            return None;
        }
        let diff = self.mean1()? - self.mean0()?;
        match normalization {
            CorrelationNormalization::Raw => Some(diff),
            CorrelationNormalization::SNormalized => {
                let var = self.pooled_variance()?;
                (!is_degenerate(var, self)).then(|| diff / var.sqrt())
            }
        }
    }

    /// Fits the equal-variance dwell model; `None` on thin data or zero variance.
    pub fn fit_model(&self, n_min: u64) -> Option<DwellModel> {
        if !self.has_support(n_min) {
            return None;
        }
        let var = self.pooled_variance()?;
        if is_degenerate(var, self) {
            return None;
        }
        let prior1 = self.n1 as f64 / self.total() as f64;
        DwellModel::new(self.mean1()?, self.mean0()?, var.sqrt(), prior1).ok()
    }
}

// Raw-sum variance of a constant sequence is only zero up to rounding.
fn is_degenerate(var: f64, stats: &UserStats) -> bool {
    let scale = 1.0 + stats.mean1().unwrap_or(0.0).powi(2) + stats.mean0().unwrap_or(0.0).powi(2);
    var <= 1e-12 * scale
}

/// Logistic posterior of a conversion given log-dwell, from two Gaussians
/// with shared standard deviation and a prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellModel {
    pub mu1: f64,
    pub mu0: f64,
    pub sigma_pooled: f64,
    pub prior1: f64,
    pub w: f64,
    pub b: f64,
}

impl DwellModel {
    pub fn new(mu1: f64, mu0: f64, sigma_pooled: f64, prior1: f64) -> Result<Self> {
        if !(sigma_pooled > 0.0 && sigma_pooled.is_finite()) {
            return Err(Error::Range(format!(
                "sigma_pooled must be positive, got {sigma_pooled}"
            )));
        }
        if !(prior1 > 0.0 && prior1 < 1.0) {
            return Err(Error::Range(format!("prior1 must lie in (0, 1), got {prior1}")));
        }
        let var = sigma_pooled * sigma_pooled;
        let w = (mu1 - mu0) / var;
        let b = (mu0 * mu0 - mu1 * mu1) / (2.0 * var) + (prior1 / (1.0 - prior1)).ln();
        Ok(DwellModel {
            mu1,
            mu0,
            sigma_pooled,
            prior1,
            w,
            b,
        })
    }

    /// `P(conversion in window | dwell)` as `sigmoid(w * ln(dwell_s) + b)`.
    pub fn posterior(&self, dwell_ms: i64) -> Result<f64> {
        if dwell_ms <= 0 {
            return Err(Error::Range(format!("dwell_ms must be positive, got {dwell_ms}")));
        }
        Ok(self.posterior_log(log_dwell_seconds(dwell_ms)))
    }

    pub fn posterior_log(&self, log_dwell_s: f64) -> f64 {
        sigmoid(self.w * log_dwell_s + self.b)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Labeling and estimation knobs shared by the stats and segmentation stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub horizon_ms: i64,
    pub buffer_ms: i64,
    pub n_min: u64,
    pub normalization: CorrelationNormalization,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            horizon_ms: 300_000,
            buffer_ms: 60_000,
            n_min: 20,
            normalization: CorrelationNormalization::Raw,
        }
    }
}

/// Labels every ad impression of a timeline, in timeline order.
pub fn label_ad_impressions(
    timeline: &UserTimeline,
    horizon_ms: i64,
    buffer_ms: i64,
) -> Result<Vec<(usize, WindowLabel)>> {
    timeline
        .impressions
        .iter()
        .enumerate()
        .filter(|(_, e)| e.source == EventSource::AdImpression)
        .map(|(i, e)| label_impression(e.timestamp_ms, &timeline.conversions, horizon_ms, buffer_ms).map(|l| (i, l)))
        .collect()
}

/// One-shot statistics over all ad impressions in a timeline with positive dwell.
pub fn timeline_stats(timeline: &UserTimeline, cfg: &StatsConfig) -> Result<UserStats> {
    let mut stats = UserStats::new(&timeline.user_id, cfg.horizon_ms);
    for (i, label) in label_ad_impressions(timeline, cfg.horizon_ms, cfg.buffer_ms)? {
        if let Some(d) = timeline.impressions[i].dwell_ms.filter(|&d| d > 0) {
            stats.update(d, label)?;
        }
    }
    Ok(stats)
}

pub fn write_stats_snapshot<'a, W: Write>(mut writer: W, stats: impl IntoIterator<Item = &'a UserStats>) -> Result<()> {
    for s in stats {
        writeln!(writer, "{}", serde_json::to_string(s).expect("stats serialize"))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_stats_snapshot<R: BufRead>(reader: R) -> Result<Vec<UserStats>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let stats: UserStats = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(stats);
    }
    Ok(out)
}
