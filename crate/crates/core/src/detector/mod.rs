//! Desk-scale two-stage detector.

mod anchors;
mod arch;
mod model;
mod roi_pool;
mod state;

pub use anchors::generate_anchors;
pub use arch::{ArchDescriptor, ArchError};
pub(crate) use model::backbone_forward;
pub use model::{
    detect_batch, forward_inference, forward_train, DetectorError, InferenceConfig, LossBreakdown, SamplingConfig, StatsMode, TrainOptions,
    TrainOutput, ROI_DELTA_WEIGHTS,
};
pub use roi_pool::roi_pool;
pub use state::{Grads, ModelState, ParamKind, StateError};
