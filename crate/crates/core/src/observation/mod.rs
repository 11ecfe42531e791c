//! Observation providers: where per-segment step scores and progress
//! distributions come from.
//!
//! Three implementations ship with the crate: [`replay::ReplayProvider`]
//! reads cached JSON Lines files, [`synthetic::SyntheticOracleProvider`]
//! derives scores from ground-truth annotations, and
//! [`remote::RemoteProvider`] queries a chat-completions style endpoint and
//! scores options from first-token log-probabilities.

pub mod prompts;
pub mod remote;
pub mod replay;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    renormalize, ObservationScores, ProgressDistribution, TaskSpec, PROGRESS_LEVELS,
};

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Transport failure or timeout; the request may be retried.
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("endpoint rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed provider response: {raw}")]
    MalformedResponse { raw: String },
    #[error("endpoint cannot provide first-token logits: {0}")]
    LogitsUnavailable(String),
    #[error("option labels {labels:?} share a first token and could not be separated")]
    LabelTokenCollision { labels: Vec<String> },
    #[error("no observation for segment {segment} of video `{video_id}`")]
    MissingObservation { video_id: String, segment: usize },
    #[error("corrupt replay file {path} at line {line}: {reason}")]
    CorruptReplayFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_))
    }
}

/// Opaque handle to a video, forwarded untouched to remote endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub uri: String,
}

/// Identifies one segment of one video of one task.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub task: &'a TaskSpec,
    pub video_id: &'a str,
    pub segment: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub media: Option<&'a MediaRef>,
}

/// Everything a provider reports about one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentObservation {
    pub vsg: ObservationScores,
    pub progress: Vec<ProgressDistribution>,
    pub next: Option<ObservationScores>,
}

impl SegmentObservation {
    /// Expected progress of every step, scaled to `[0, 1]`.
    pub fn expected_progress(&self) -> Vec<f64> {
        self.progress.iter().map(expected_progress).collect()
    }
}

/// Source of step scores and progress distributions.
///
/// Implementations must be deterministic for a fixed configuration and
/// cache, and safe to call from several videos at once.
pub trait ObservationProvider: Send + Sync {
    fn vsg_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError>;

    fn progress_scores(
        &self,
        req: &SegmentRequest<'_>,
        step: usize,
    ) -> Result<ProgressDistribution, ProviderError>;

    /// Scores of the next-step prompt; `None` when the provider has none.
    fn next_step_scores(
        &self,
        _req: &SegmentRequest<'_>,
    ) -> Result<Option<ObservationScores>, ProviderError> {
        Ok(None)
    }

    /// All scores for one segment.
    fn observe(
        &self,
        req: &SegmentRequest<'_>,
        want_next: bool,
    ) -> Result<SegmentObservation, ProviderError> {
        let vsg = self.vsg_scores(req)?;
        let progress = (0..req.task.num_steps())
            .map(|step| self.progress_scores(req, step))
            .collect::<Result<_, _>>()?;
        let next = if want_next {
            self.next_step_scores(req)?
        } else {
            None
        };
        Ok(SegmentObservation {
            vsg,
            progress,
            next,
        })
    }
}

impl<P: ObservationProvider + ?Sized> ObservationProvider for &P {
    fn vsg_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError> {
        (**self).vsg_scores(req)
    }

    fn progress_scores(
        &self,
        req: &SegmentRequest<'_>,
        step: usize,
    ) -> Result<ProgressDistribution, ProviderError> {
        (**self).progress_scores(req, step)
    }

    fn next_step_scores(
        &self,
        req: &SegmentRequest<'_>,
    ) -> Result<Option<ObservationScores>, ProviderError> {
        (**self).next_step_scores(req)
    }

    fn observe(
        &self,
        req: &SegmentRequest<'_>,
        want_next: bool,
    ) -> Result<SegmentObservation, ProviderError> {
        (**self).observe(req, want_next)
    }
}

/// Mean progress token divided by 9, so that a finished step scores 1.
pub fn expected_progress(dist: &ProgressDistribution) -> f64 {
    let mean: f64 = dist
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, p)| j as f64 * p)
        .sum();
    (mean / (PROGRESS_LEVELS - 1) as f64).clamp(0.0, 1.0)
}

/// Softmax restricted to the given candidate logits. `-inf` marks a
/// candidate the endpoint gave no logit for; it receives zero mass.
/// Returns `None` when every candidate is missing.
pub fn restricted_softmax(logits: &[f64]) -> Option<Vec<f64>> {
    let max = logits
        .iter()
        .copied()
        .filter(|l| !l.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| if l.is_nan() { 0.0 } else { (l - max).exp() })
        .collect();
    renormalize(&weights)
}

/// Multi-choice label of option `index`: `A..Z`, then `AA, AB, ...`.
pub fn option_label(index: usize) -> String {
    let mut n = index + 1;
    let mut letters = Vec::new();
    while n > 0 {
        n -= 1;
        letters.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    letters.reverse();
    String::from_utf8(letters).expect("ASCII letters")
}

/// Labels for the `num_steps` steps followed by the "none" option.
pub fn option_labels(num_steps: usize) -> Vec<String> {
    (0..=num_steps).map(option_label).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_progress_examples() {
        let one_hot = |k| ProgressDistribution::one_hot(PROGRESS_LEVELS, k);
        assert_eq!(expected_progress(&one_hot(9)), 1.0);
        assert_eq!(expected_progress(&one_hot(0)), 0.0);
        let uniform = ProgressDistribution::uniform(PROGRESS_LEVELS);
        assert!((expected_progress(&uniform) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let p = restricted_softmax(&[2.0, 1.0, 0.0]).unwrap();
        let e = [2f64.exp(), 1f64.exp(), 1.0];
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(e.iter().map(|x| x / z)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.665).abs() < 5e-4 && (p[1] - 0.245).abs() < 5e-4);
        assert_eq!(restricted_softmax(&[3.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(
            restricted_softmax(&[1e308, f64::NEG_INFINITY]).unwrap(),
            vec![1.0, 0.0]
        );
        assert!(restricted_softmax(&[f64::NEG_INFINITY; 2]).is_none());
    }

    #[test]
    fn labels_follow_spreadsheet_order() {
        assert_eq!(option_label(0), "A");
        assert_eq!(option_label(25), "Z");
        assert_eq!(option_label(26), "AA");
        assert_eq!(option_label(27), "AB");
        assert_eq!(option_label(51), "AZ");
        assert_eq!(option_label(52), "BA");
        assert_eq!(option_label(701), "ZZ");
        assert_eq!(option_label(702), "AAA");
        let labels = option_labels(27);
        assert_eq!(labels.len(), 28);
        assert_eq!(labels[26], "AA");
        assert_eq!(labels[27], "AB");
    }
}
