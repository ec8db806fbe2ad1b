//! Declarative run configuration (TOML).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, LearnerConfig};
use crate::event::{AttributeSchema, DenoiseBounds};
use crate::segment::{SegmentationConfig, SegmenterConfig, StatsMode};
use crate::stats::{CorrelationNormalization, StatsConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub simulator: u64,
    pub injection: u64,
    pub hash: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            simulator: 7,
            injection: 8,
            hash: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub horizon_s_ms: i64,
    pub buffer_ms: i64,
    pub denoise_min_ms: i64,
    pub denoise_max_ms: i64,
    pub n_min: u64,
    pub target_active_fraction: f64,
    pub fixed_epsilon: Option<f64>,
    pub epoch_ms: i64,
    pub stats_mode: StatsMode,
    pub correlation_normalization: CorrelationNormalization,
    pub policy: Option<PathBuf>,
    pub seeds: Seeds,
    pub replicas: usize,
    pub learning_rate: f64,
    pub hash_dim: usize,
    pub schema: AttributeSchema,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seg = SegmentationConfig::default();
        let learner = LearnerConfig::default();
        RunConfig {
            horizon_s_ms: seg.stats.horizon_ms,
            buffer_ms: seg.stats.buffer_ms,
            denoise_min_ms: seg.denoise.min_dwell_ms,
            denoise_max_ms: seg.denoise.max_dwell_ms,
            n_min: seg.stats.n_min,
            target_active_fraction: seg.segmenter.target_active_fraction,
            fixed_epsilon: None,
            epoch_ms: seg.epoch_ms,
            stats_mode: seg.stats_mode,
            correlation_normalization: seg.stats.normalization,
            policy: None,
            seeds: Seeds::default(),
            replicas: 3,
            learning_rate: learner.learning_rate,
            hash_dim: learner.hash_dim,
            schema: AttributeSchema::default(),
        }
    }
}

/// 1-based line of the first `key = ...` assignment, if any.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

impl RunConfig {
    /// Parses and validates; errors name the offending key and its line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate().map_err(|(key, msg)| match key_line(text, key) {
            Some(line) => Error::Config(format!("line {line}: {key}: {msg}")),
            None => Error::Config(format!("{key}: {msg}")),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.horizon_s_ms <= 0 {
            return Err(("horizon_s_ms", format!("must be positive, got {}", self.horizon_s_ms)));
        }
        if self.buffer_ms < 0 {
            return Err(("buffer_ms", format!("must be >= 0, got {}", self.buffer_ms)));
        }
        if self.denoise_min_ms >= self.denoise_max_ms {
            return Err((
                "denoise_min_ms",
                format!(
                    "must be below denoise_max_ms ({} >= {})",
                    self.denoise_min_ms, self.denoise_max_ms
                ),
            ));
        }
        if self.n_min == 0 {
            return Err(("n_min", "must be >= 1".into()));
        }
        if !(self.target_active_fraction > 0.0 && self.target_active_fraction < 1.0) {
            return Err((
                "target_active_fraction",
                format!("must lie in (0, 1), got {}", self.target_active_fraction),
            ));
        }
        if let Some(eps) = self.fixed_epsilon {
            if !(eps >= 0.0) {
                return Err(("fixed_epsilon", format!("must be >= 0, got {eps}")));
            }
        }
        if self.epoch_ms <= 0 {
            return Err(("epoch_ms", format!("must be positive, got {}", self.epoch_ms)));
        }
        if self.replicas == 0 {
            return Err(("replicas", "must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if self.hash_dim < 2 {
            return Err(("hash_dim", format!("must be >= 2, got {}", self.hash_dim)));
        }
        Ok(())
    }

    pub fn stats(&self) -> StatsConfig {
        StatsConfig {
            horizon_ms: self.horizon_s_ms,
            buffer_ms: self.buffer_ms,
            n_min: self.n_min,
            normalization: self.correlation_normalization,
        }
    }

    pub fn denoise(&self) -> DenoiseBounds {
        DenoiseBounds {
            min_dwell_ms: self.denoise_min_ms,
            max_dwell_ms: self.denoise_max_ms,
        }
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig {
            stats: self.stats(),
            segmenter: SegmenterConfig {
                target_active_fraction: self.target_active_fraction,
                fixed_epsilon: self.fixed_epsilon,
                n_min: self.n_min,
                normalization: self.correlation_normalization,
            },
            denoise: self.denoise(),
            epoch_ms: self.epoch_ms,
            stats_mode: self.stats_mode,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            learner: LearnerConfig {
                learning_rate: self.learning_rate,
                hash_dim: self.hash_dim,
            },
            seed: self.seeds.hash,
            replicas: self.replicas,
        }
    }
}
