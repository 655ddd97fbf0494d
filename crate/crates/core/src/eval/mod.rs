//! Evaluation: per-frame NDMS over long horizons and distribution metrics on a
//! fixed random feature space.

mod benchmark;
mod features;
mod metrics;
mod ndms;
mod report;

pub use benchmark::{evaluate, flatness, horizon_result, longterm_benchmark, EvalConfig};
pub use features::{motion_statistics, FeatureExtractor, DEFAULT_D_FEAT};
pub use metrics::{diversity, fid, mmodality, r_precision};
pub use ndms::{
    ndms_curve, ndms_curve_dyadic, ndms_frame, window_frames, MotionWindow, ReferenceBank, DEFAULT_SUBSAMPLE,
    STATIC_EPS,
};
pub use report::{EvalReport, HorizonResult, MetricSummary};
