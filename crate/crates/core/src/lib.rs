//! Self-supervised user segmentation from ad dwell times and conversion
//! history, plus segment-conditional gating of event-based feature streams.
//!
//! Pipeline: [`event`] ingestion and denoising, [`stats`] per-user windowed
//! statistics, [`segment`] active/passive assignment, [`gate`] attribute
//! removal and boosting, [`eval`] normalized-entropy comparison of gating
//! policies. [`sim`] generates streams with known ground truth.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod event;
pub mod gate;
pub mod segment;
pub mod sim;
pub mod stats;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{compare_policies, normalized_entropy, train_predict_online, EvalConfig, NEReport};
pub use event::{
    adjust_label_window, denoise_dwell, parse_event, AttrValue, AttributeSchema, DenoiseBounds, Event, EventSource,
    LabelWindow, UserTimeline,
};
pub use gate::{expected_reduction, gate, CostLedger, GateOutcome, GatePolicy, GatedEvent};
pub use segment::{
    assign_segment, calibrate_epsilon, run_epoch, segment_stream, EpochCalibration, Segment, SegmentAssignment,
    SegmentTable, SegmentationConfig, StatsMode,
};
pub use sim::{inject_logging_artifacts, GroundTruth, Regime, Simulator, UserProfile};
pub use stats::{label_impression, CorrelationNormalization, DwellModel, UserStats, WindowLabel};
