//! Online step grounding for procedural videos.
//!
//! A [`filter::StepFilter`] keeps a belief over a task's steps (plus a
//! "none" state) for each fixed-length segment of a video. Each segment it
//! predicts with a transition matrix gated by step dependencies and the
//! progress observed so far, then multiplies in the provider's step scores.
//! Beliefs can be turned into timed segments ([`localization`]) and scored
//! against annotations ([`metrics`]).

pub mod dependency;
pub mod filter;
pub mod io;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod observation;
pub mod transition;

pub use dependency::DependencyMatrix;
pub use filter::{FilterConfig, SegmentInput, StepFilter, StepPrior};
pub use localization::{DetectedSegment, LocalizationConfig};
pub use metrics::EvalReport;
pub use model::{
    AlignmentMatrix, Belief, GroundTruthAnnotation, ObservationScores, ProgressDistribution,
    SegmentTimeline, TaskSpec,
};
pub use observation::{ObservationProvider, ProviderError};
pub use transition::TransitionConfig;
