//! Batch runner for the step-grounding engine: manifests, providers,
//! per-video streaming, localization, metrics and report files.

pub mod config;
pub mod pipeline;
pub mod violations;

use thiserror::Error;

use stepground::dependency::DependencyError;
use stepground::filter::FilterError;
use stepground::io::IoError;
use stepground::metrics::MetricsError;
use stepground::observation::ProviderError;

pub use config::RunConfig;
pub use pipeline::{run_benchmark, run_manifest, run_video, BenchOutcome, Manifest, ManifestEntry};
pub use violations::run_violation_analysis;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dependency(#[from] DependencyError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{failed} of {total} videos failed")]
    PartialFailure {
        failed: usize,
        total: usize,
        outcome: Box<BenchOutcome>,
    },
}

impl HarnessError {
    /// 2 when some videos failed after a valid start, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::PartialFailure { .. } => 2,
            _ => 1,
        }
    }
}
