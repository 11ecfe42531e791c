//! Online Bayesian filtering over steps.
//!
//! Each segment runs predict, update, then progress ingestion, in that
//! order: the progress estimated on segment `t` only shapes the transition
//! matrices of later segments.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dependency::DependencyMatrix;
use crate::model::{renormalize, AlignmentMatrix, Belief, ObservationScores, TaskSpec};
use crate::transition::{
    AdjustedTransition, ProgressTracker, TransitionConfig, TransitionError, TransitionModel,
};

/// Floor applied to a non-uniform step prior before dividing by it.
const STEP_PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("step prior `next_step` requires next-step scores for segment {segment}")]
    MissingStepPrior { segment: usize },
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

/// Prior over states that the observation scores are divided by during the
/// update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPrior {
    /// Constant over states, so it cancels in the normalization.
    #[default]
    Uniform,
    /// Scores of the next-step prompt on the current segment.
    NextStep,
    /// Uniform at the start, then pushed through each adjusted transition.
    Propagated,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    pub transition: TransitionConfig,
    pub step_prior: StepPrior,
}

/// `prior[i] = sum_j transition[j][i] * belief[j]`.
pub fn predict_with(transition: &AdjustedTransition, belief: &[f64]) -> Vec<f64> {
    transition
        .as_array()
        .t()
        .dot(&ndarray::ArrayView1::from(belief))
        .to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub belief: Belief,
    /// Set when the product had no mass and the prior was kept.
    pub degenerate: bool,
}

/// Multiplies the prior by the observation scores and normalizes.
pub fn update(prior: &[f64], obs: &ObservationScores) -> UpdateOutcome {
    let product: Vec<f64> = prior
        .iter()
        .zip(obs.as_slice())
        .map(|(p, o)| p * o)
        .collect();
    finish_update(prior, &product)
}

/// Update under a non-uniform step prior: the scores are divided by it
/// before multiplying with the predicted prior.
pub fn update_with_step_prior(
    prior: &[f64],
    obs: &ObservationScores,
    step_prior: &[f64],
) -> UpdateOutcome {
    let product: Vec<f64> = prior
        .iter()
        .zip(obs.as_slice())
        .zip(step_prior)
        .map(|((p, o), s)| p * o / s.max(STEP_PRIOR_FLOOR))
        .collect();
    finish_update(prior, &product)
}

fn finish_update(prior: &[f64], product: &[f64]) -> UpdateOutcome {
    match renormalize(product) {
        Some(values) => UpdateOutcome {
            belief: Belief::new(values).expect("normalized weights form a simplex"),
            degenerate: false,
        },
        None => {
            warn!("observation has no mass under the predicted prior; keeping the prior");
            UpdateOutcome {
                belief: Belief::from_weights(prior).expect("prior is a simplex"),
                degenerate: true,
            }
        }
    }
}

/// Everything the filter consumes for one segment.
#[derive(Debug, Clone, Copy)]
pub struct SegmentInput<'a> {
    pub scores: &'a ObservationScores,
    /// Expected progress of every step on this segment, in `[0, 1]`.
    pub progress: &'a [f64],
    pub next_step: Option<&'a ObservationScores>,
}

/// Filter state for one video.
#[derive(Debug, Clone)]
pub struct StepFilter {
    model: TransitionModel,
    step_prior: StepPrior,
    tracker: ProgressTracker,
    belief: Belief,
    propagated_prior: Vec<f64>,
    segment: usize,
    alignment: AlignmentMatrix,
    degenerate_updates: usize,
}

impl StepFilter {
    /// Starts from a uniform belief and an all-zero progress tracker.
    pub fn new(
        task: &TaskSpec,
        deps: DependencyMatrix,
        config: FilterConfig,
    ) -> Result<Self, FilterError> {
        if deps.num_steps() != task.num_steps() {
            return Err(FilterError::DimensionMismatch {
                what: "dependency matrix",
                expected: task.num_steps(),
                actual: deps.num_steps(),
            });
        }
        let states = task.num_states();
        Ok(Self {
            model: TransitionModel::new(deps, config.transition),
            step_prior: config.step_prior,
            tracker: ProgressTracker::new(task.num_steps()),
            belief: Belief::uniform(states),
            propagated_prior: vec![1.0 / states as f64; states],
            segment: 0,
            alignment: AlignmentMatrix::new(),
            degenerate_updates: 0,
        })
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn tracker(&self) -> &ProgressTracker {
        &self.tracker
    }

    pub fn model(&self) -> &TransitionModel {
        &self.model
    }

    /// Number of segments processed so far.
    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn alignment(&self) -> &AlignmentMatrix {
        &self.alignment
    }

    pub fn into_alignment(self) -> AlignmentMatrix {
        self.alignment
    }

    pub fn degenerate_updates(&self) -> usize {
        self.degenerate_updates
    }

    /// Transition matrix for the upcoming segment.
    pub fn current_transition(&self) -> AdjustedTransition {
        self.model.adjusted(&self.tracker)
    }

    /// Prior over the upcoming segment's state.
    pub fn predict(&self) -> Vec<f64> {
        predict_with(&self.current_transition(), self.belief.as_slice())
    }

    /// Processes one segment and returns the emitted belief.
    pub fn step(&mut self, input: SegmentInput<'_>) -> Result<&Belief, FilterError> {
        let states = self.belief.len();
        if input.scores.len() != states {
            return Err(FilterError::DimensionMismatch {
                what: "observation scores",
                expected: states,
                actual: input.scores.len(),
            });
        }
        if input.progress.len() != states - 1 {
            return Err(FilterError::DimensionMismatch {
                what: "progress",
                expected: states - 1,
                actual: input.progress.len(),
            });
        }

        let mut next_tracker = self.tracker.clone();
        next_tracker.observe(input.progress)?;

        let transition = self.current_transition();
        let prior = predict_with(&transition, self.belief.as_slice());
        let outcome = match self.step_prior {
            StepPrior::Uniform => update(&prior, input.scores),
            StepPrior::NextStep => {
                let next = input.next_step.ok_or(FilterError::MissingStepPrior {
                    segment: self.segment,
                })?;
                if next.len() != states {
                    return Err(FilterError::DimensionMismatch {
                        what: "next-step scores",
                        expected: states,
                        actual: next.len(),
                    });
                }
                update_with_step_prior(&prior, input.scores, next.as_slice())
            }
            StepPrior::Propagated => {
                self.propagated_prior = predict_with(&transition, &self.propagated_prior);
                update_with_step_prior(&prior, input.scores, &self.propagated_prior)
            }
        };
        if outcome.degenerate {
            self.degenerate_updates += 1;
        }

        self.tracker = next_tracker;
        self.belief = outcome.belief;
        self.alignment.push(self.belief.clone());
        self.segment += 1;
        Ok(&self.belief)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::NoneTransitions;
    use ndarray::array;

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            goal: "g".into(),
            steps: (0..n).map(|i| format!("s{i}")).collect(),
        }
    }

    fn obs(values: &[f64]) -> ObservationScores {
        ObservationScores::new(values.to_vec()).unwrap()
    }

    #[test]
    fn init_is_uniform() {
        let f = StepFilter::new(
            &task(3),
            DependencyMatrix::zeros(3),
            FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(f.belief().as_slice(), &[0.25; 4]);
        assert_eq!(f.segment(), 0);
        assert!(f.tracker().values().iter().all(|&p| p == 0.0));
        let f = StepFilter::new(
            &task(1),
            DependencyMatrix::zeros(1),
            FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(f.belief().as_slice(), &[0.5, 0.5]);
        assert!(matches!(
            StepFilter::new(
                &task(3),
                DependencyMatrix::zeros(2),
                FilterConfig::default()
            ),
            Err(FilterError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn predict_examples() {
        let uniform = AdjustedTransition::from_array(array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(predict_with(&uniform, &[0.9, 0.1]), vec![0.5, 0.5]);
        let identity = AdjustedTransition::from_array(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(predict_with(&identity, &[0.3, 0.7]), vec![0.3, 0.7]);
        let t = AdjustedTransition::from_array(array![[0.9, 0.1], [0.2, 0.8]]);
        assert_eq!(predict_with(&t, &[1.0, 0.0]), vec![0.9, 0.1]);
    }

    #[test]
    fn update_examples() {
        let out = update(&[1.0 / 3.0; 3], &obs(&[0.0, 1.0, 0.0]));
        assert_eq!(out.belief.as_slice(), &[0.0, 1.0, 0.0]);
        let out = update(&[0.0, 0.0, 1.0], &obs(&[1.0 / 3.0; 3]));
        assert_eq!(out.belief.as_slice(), &[0.0, 0.0, 1.0]);
        let out = update(&[0.5, 0.3, 0.2], &obs(&[0.2, 0.3, 0.5]));
        let expected = [10.0 / 29.0, 9.0 / 29.0, 10.0 / 29.0];
        for (a, e) in out.belief.as_slice().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(!out.degenerate);
    }

    #[test]
    fn degenerate_update_keeps_prior() {
        let out = update(&[1.0, 0.0], &obs(&[0.0, 1.0]));
        assert!(out.degenerate);
        assert_eq!(out.belief.as_slice(), &[1.0, 0.0]);
        assert!(out.belief.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn step_prior_division() {
        let out = update_with_step_prior(&[0.5, 0.5], &obs(&[0.5, 0.5]), &[0.8, 0.2]);
        assert!((out.belief[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dependency_suppresses_blocked_step() {
        // Step 1 requires step 0; nothing has progressed at t = 0.
        let deps = DependencyMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let config = FilterConfig {
            transition: TransitionConfig {
                epsilon: 0.0,
                none: NoneTransitions::Escape { mass: None },
                ..Default::default()
            },
            ..Default::default()
        };
        let mut f = StepFilter::new(&task(2), deps, config).unwrap();
        let scores = obs(&[0.2, 0.6, 0.2]);
        let belief = f
            .step(SegmentInput {
                scores: &scores,
                progress: &[0.0, 0.0],
                next_step: None,
            })
            .unwrap()
            .clone();
        // Readiness of step 1 is zero, so it only keeps the "none" row's share.
        assert!(belief[1] < 0.6);
        // Step rows are [2/3, 0, 1/3], the "none" row is uniform, and the
        // belief starts at 1/3 everywhere: prior = [5/9, 1/9, 1/3].
        let p = [5.0 / 9.0 * 0.2, 1.0 / 9.0 * 0.6, 1.0 / 3.0 * 0.2];
        let z: f64 = p.iter().sum();
        for (a, e) in belief.as_slice().iter().zip(p.iter().map(|x| x / z)) {
            assert!((a - e).abs() < 1e-12, "{belief:?}");
        }
    }

    #[test]
    fn one_hot_observations_replay_exactly() {
        let mut f = StepFilter::new(
            &task(2),
            DependencyMatrix::zeros(2),
            FilterConfig::default(),
        )
        .unwrap();
        for k in [0, 1, 2, 1] {
            let scores = ObservationScores::one_hot(3, k);
            let b = f
                .step(SegmentInput {
                    scores: &scores,
                    progress: &[0.0, 0.0],
                    next_step: None,
                })
                .unwrap();
            assert_eq!(b.argmax(), k);
            assert_eq!(b[k], 1.0);
        }
        assert_eq!(f.alignment().num_segments(), 4);
    }

    #[test]
    fn next_step_prior_requires_scores() {
        let config = FilterConfig {
            step_prior: StepPrior::NextStep,
            ..Default::default()
        };
        let mut f = StepFilter::new(&task(1), DependencyMatrix::zeros(1), config).unwrap();
        let scores = obs(&[0.5, 0.5]);
        assert!(matches!(
            f.step(SegmentInput {
                scores: &scores,
                progress: &[0.0],
                next_step: None
            }),
            Err(FilterError::MissingStepPrior { segment: 0 })
        ));
    }

    #[test]
    fn shape_errors() {
        let mut f = StepFilter::new(
            &task(2),
            DependencyMatrix::zeros(2),
            FilterConfig::default(),
        )
        .unwrap();
        let bad = obs(&[0.5, 0.5]);
        assert!(f
            .step(SegmentInput {
                scores: &bad,
                progress: &[0.0, 0.0],
                next_step: None
            })
            .is_err());
        let good = obs(&[0.2, 0.3, 0.5]);
        assert!(f
            .step(SegmentInput {
                scores: &good,
                progress: &[0.0],
                next_step: None
            })
            .is_err());
        assert_eq!(f.segment(), 0);
    }
}
