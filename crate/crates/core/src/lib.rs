//! Traffic-rate side channels in smart homes: synthetic traces, device
//! identification, activity inference, and traffic shaping as a defense.

pub mod harness;
pub mod identify;
pub mod infer;
pub mod scalar;
pub mod seed;
pub mod shield;
pub mod trace;

pub use identify::{
    dns_identify, knn_train, oui_lookup, stratified_cv, window_features, DnsFingerprintDb,
    IdentifyError, KnnModel, OuiTable, WindowFeature,
};
pub use infer::{
    aggregate_tunnel, classify_camera_mode, detect_events, infer_activities, ActivityEvent,
    ActivityKind, CameraMode, EventDetectorConfig, InferError,
};
pub use scalar::Scalar;
pub use seed::derive_seed;
pub use shield::{
    cellify, cost_context, overhead_report, shape, shape_home, Cell, Discipline, OverheadReport,
    ShapedSchedule, ShapingConfig, ShieldError,
};
pub use trace::{
    emit_trace, parse_trace, rate_series, split_flows, Direction, Flow, PacketRecord, Protocol,
    RateSeries, Scope, TraceError,
};

pub type WindowFeatureF64 = WindowFeature<f64>;
pub type WindowFeatureF32 = WindowFeature<f32>;
pub type KnnModelF64 = KnnModel<f64>;
pub type KnnModelF32 = KnnModel<f32>;
