//! Transition model over steps: a static base matrix derived from step
//! dependencies, re-weighted every segment by how ready and how valid each
//! step is given the progress observed so far.

use log::debug;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dependency::DependencyMatrix;
use crate::model::renormalize;

/// Floor added to every re-weighted step transition.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransitionError {
    #[error("progress for step {step} is {value}, outside [0, 1]")]
    OutOfRangeProgress { step: usize, value: f64 },
    #[error("expected {expected} progress values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// How steps without prerequisites are opened up in the base matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixupRule {
    /// Every step may move to a step that has no prerequisites.
    #[default]
    Column,
    /// A step whose transposed-dependency row is empty may move anywhere.
    Row,
}

/// Treatment of the trailing "none" state in the adjusted matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoneTransitions {
    /// Every step row sends a fixed mass to "none" (`1/(S+1)` when unset);
    /// the "none" row is uniform over all states.
    Escape { mass: Option<f64> },
    /// "None" behaves as an extra step without prerequisites or successors.
    Unconstrained,
}

impl Default for NoneTransitions {
    fn default() -> Self {
        NoneTransitions::Escape { mass: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub fixup: FixupRule,
    pub epsilon: f64,
    pub none: NoneTransitions,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            fixup: FixupRule::Column,
            epsilon: DEFAULT_EPSILON,
            none: NoneTransitions::default(),
        }
    }
}

/// Row-stochastic base matrix over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseTransition(Array2<f64>);

impl BaseTransition {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_states(&self) -> usize {
        self.0.nrows()
    }
}

/// Row-stochastic matrix over steps and "none" for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedTransition(Array2<f64>);

impl AdjustedTransition {
    /// Wraps an arbitrary row-stochastic matrix.
    pub fn from_array(matrix: Array2<f64>) -> Self {
        Self(matrix)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }
}

fn normalize_rows(matrix: &mut Array2<f64>) {
    for mut row in matrix.axis_iter_mut(Axis(0)) {
        let weights = row.to_vec();
        let normalized = renormalize(&weights).expect("row has positive mass");
        row.assign(&Array1::from(normalized));
    }
}

/// Transposes the dependencies, adds self-transitions and opens transitions
/// into prerequisite-free steps, then normalizes rows.
pub fn init_transition(deps: &DependencyMatrix, fixup: FixupRule) -> BaseTransition {
    let d = deps.as_array();
    let n = d.nrows();
    let mut t = d.t().to_owned();
    match fixup {
        FixupRule::Column => {
            let free: Vec<bool> = d.outer_iter().map(|row| row.sum() == 0.0).collect();
            for i in 0..n {
                t[(i, i)] = 1.0;
            }
            for (j, _) in free.iter().enumerate().filter(|(_, f)| **f) {
                t.column_mut(j).fill(1.0);
            }
        }
        FixupRule::Row => {
            let empty: Vec<bool> = t.outer_iter().map(|row| row.sum() == 0.0).collect();
            for (i, _) in empty.iter().enumerate().filter(|(_, e)| **e) {
                t.row_mut(i).fill(1.0);
            }
            for i in 0..n {
                t[(i, i)] = 1.0;
            }
        }
    }
    normalize_rows(&mut t);
    BaseTransition(t)
}

/// Running maximum of the progress observed for each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressTracker {
    max_progress: Vec<f64>,
}

impl ProgressTracker {
    pub fn new(num_steps: usize) -> Self {
        Self {
            max_progress: vec![0.0; num_steps],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self, TransitionError> {
        check_progress(&values)?;
        Ok(Self {
            max_progress: values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.max_progress
    }

    /// Folds one segment's progress into the running maximum.
    pub fn observe(&mut self, progress: &[f64]) -> Result<(), TransitionError> {
        if progress.len() != self.max_progress.len() {
            return Err(TransitionError::LengthMismatch {
                expected: self.max_progress.len(),
                actual: progress.len(),
            });
        }
        check_progress(progress)?;
        for (m, p) in self.max_progress.iter_mut().zip(progress) {
            *m = m.max(*p);
        }
        Ok(())
    }
}

fn check_progress(values: &[f64]) -> Result<(), TransitionError> {
    match values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        Some((step, &value)) => Err(TransitionError::OutOfRangeProgress { step, value }),
        None => Ok(()),
    }
}

/// Returns the tracker after observing `progress`.
pub fn observe_progress(
    tracker: &ProgressTracker,
    progress: &[f64],
) -> Result<ProgressTracker, TransitionError> {
    let mut next = tracker.clone();
    next.observe(progress)?;
    Ok(next)
}

/// Dependency-weighted mean of the prerequisites' maximum progress; steps
/// without prerequisites are always ready.
pub fn readiness(deps: &DependencyMatrix, tracker: &ProgressTracker) -> Vec<f64> {
    let progress = tracker.values();
    deps.as_array()
        .outer_iter()
        .map(|row| {
            let total = row.sum();
            if total == 0.0 {
                1.0
            } else {
                row.iter().zip(progress).map(|(w, p)| w * p).sum::<f64>() / total
            }
        })
        .collect()
}

/// Dependency-weighted mean of how unfinished each successor still is;
/// steps without successors are always valid.
pub fn validity(deps: &DependencyMatrix, tracker: &ProgressTracker) -> Vec<f64> {
    let progress = tracker.values();
    deps.as_array()
        .axis_iter(Axis(1))
        .map(|col| {
            let total = col.sum();
            if total == 0.0 {
                1.0
            } else {
                col.iter()
                    .zip(progress)
                    .map(|(w, p)| w * (1.0 - p))
                    .sum::<f64>()
                    / total
            }
        })
        .collect()
}

/// Re-weights each base row by the target's readiness and validity, plus an
/// `epsilon` floor, and normalizes. A row left without mass keeps its base
/// weights.
pub fn adjust_step_block(
    base: &Array2<f64>,
    readiness: &[f64],
    validity: &[f64],
    epsilon: f64,
) -> Array2<f64> {
    let n = base.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let weights: Vec<f64> = (0..n)
            .map(|j| base[(i, j)] * readiness[j] * validity[j] + epsilon)
            .collect();
        let row = renormalize(&weights).unwrap_or_else(|| {
            debug!("transition row {i} fully blocked; keeping base weights");
            base.row(i).to_vec()
        });
        out.row_mut(i).assign(&Array1::from(row));
    }
    out
}

/// Dependencies, base matrix and configuration needed to produce the
/// adjusted transition matrix of any segment.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    deps: DependencyMatrix,
    base: BaseTransition,
    config: TransitionConfig,
}

impl TransitionModel {
    pub fn new(deps: DependencyMatrix, config: TransitionConfig) -> Self {
        let base = match config.none {
            NoneTransitions::Escape { .. } => init_transition(&deps, config.fixup),
            NoneTransitions::Unconstrained => {
                let n = deps.num_steps();
                let mut extended = Array2::zeros((n + 1, n + 1));
                extended
                    .slice_mut(ndarray::s![..n, ..n])
                    .assign(deps.as_array());
                let extended =
                    DependencyMatrix::new(extended).expect("zero-padded dependencies stay valid");
                init_transition(&extended, config.fixup)
            }
        };
        Self { deps, base, config }
    }

    pub fn deps(&self) -> &DependencyMatrix {
        &self.deps
    }

    pub fn base(&self) -> &BaseTransition {
        &self.base
    }

    pub fn config(&self) -> &TransitionConfig {
        &self.config
    }

    pub fn num_steps(&self) -> usize {
        self.deps.num_steps()
    }

    /// Adjusted matrix for the next segment, from progress strictly before it.
    pub fn adjusted(&self, tracker: &ProgressTracker) -> AdjustedTransition {
        let r = readiness(&self.deps, tracker);
        let v = validity(&self.deps, tracker);
        adjust(&self.base, &r, &v, &self.config)
    }
}

/// Full adjusted matrix including the "none" state.
///
/// `base` is either the `S x S` step matrix (escape mode) or the
/// `(S+1) x (S+1)` matrix with "none" as an unconstrained step.
pub fn adjust(
    base: &BaseTransition,
    readiness: &[f64],
    validity: &[f64],
    config: &TransitionConfig,
) -> AdjustedTransition {
    let n = readiness.len();
    match config.none {
        NoneTransitions::Unconstrained => {
            let mut r = readiness.to_vec();
            let mut v = validity.to_vec();
            r.push(1.0);
            v.push(1.0);
            AdjustedTransition(adjust_step_block(base.as_array(), &r, &v, config.epsilon))
        }
        NoneTransitions::Escape { mass } => {
            let states = n + 1;
            let escape = mass.unwrap_or(1.0 / states as f64);
            let block = adjust_step_block(base.as_array(), readiness, validity, config.epsilon);
            let mut out = Array2::zeros((states, states));
            out.slice_mut(ndarray::s![..n, ..n])
                .assign(&(block * (1.0 - escape)));
            for i in 0..n {
                out[(i, n)] = escape;
            }
            out.row_mut(n).fill(1.0 / states as f64);
            AdjustedTransition(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn deps(rows: &[Vec<f64>]) -> DependencyMatrix {
        DependencyMatrix::from_rows(rows).unwrap()
    }

    fn assert_rows_close(actual: &Array2<f64>, expected: &[Vec<f64>], tol: f64) {
        for (row, exp) in actual.outer_iter().zip(expected) {
            for (a, e) in row.iter().zip(exp) {
                assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn init_without_dependencies_is_uniform() {
        let base = init_transition(&DependencyMatrix::zeros(3), FixupRule::Column);
        assert!(base.as_array().iter().all(|&x| x == 1.0 / 3.0));
    }

    #[test]
    fn init_two_step_trace() {
        let base = init_transition(&deps(&[vec![0.0, 0.0], vec![1.0, 0.0]]), FixupRule::Column);
        assert_rows_close(base.as_array(), &[vec![0.5, 0.5], vec![0.5, 0.5]], 0.0);
    }

    #[test]
    fn init_three_step_chain_trace() {
        // D[1][0] = D[2][1] = 1. D^T plus self loops, then column 0 opened.
        let d = deps(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let base = init_transition(&d, FixupRule::Column);
        let third = 1.0 / 3.0;
        assert_rows_close(
            base.as_array(),
            &[
                vec![0.5, 0.5, 0.0],
                vec![third, third, third],
                vec![0.5, 0.0, 0.5],
            ],
            1e-15,
        );

        // Literal row reading: only row 2 of D^T is empty.
        let row = init_transition(&d, FixupRule::Row);
        assert_rows_close(
            row.as_array(),
            &[
                vec![0.5, 0.5, 0.0],
                vec![0.0, 0.5, 0.5],
                vec![third, third, third],
            ],
            1e-15,
        );
    }

    #[test]
    fn readiness_examples() {
        let single = deps(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        let tracker = ProgressTracker::from_values(vec![0.0, 0.9]).unwrap();
        let r = readiness(&single, &tracker);
        assert_eq!(r, vec![0.9, 1.0]);

        let pair = deps(&[
            vec![0.0, 0.5, 0.5],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ]);
        let tracker = ProgressTracker::from_values(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(readiness(&pair, &tracker)[0], 0.5);
    }

    #[test]
    fn validity_examples() {
        // Step 1 requires step 0; step 1 finished.
        let d = deps(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let tracker = ProgressTracker::from_values(vec![0.0, 1.0]).unwrap();
        assert_eq!(validity(&d, &tracker), vec![0.0, 1.0]);

        // Steps 1 and 2 both require step 0.
        let d = deps(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ]);
        let tracker = ProgressTracker::from_values(vec![0.0, 0.2, 0.6]).unwrap();
        assert!((validity(&d, &tracker)[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn adjust_examples() {
        let uniform = array![[0.5, 0.5], [0.5, 0.5]];
        let block = adjust_step_block(&uniform, &[1.0, 0.5], &[1.0, 1.0], 0.0);
        assert_rows_close(&block, &vec![vec![2.0 / 3.0, 1.0 / 3.0]; 2], 1e-12);

        let blocked = adjust_step_block(&uniform, &[1.0, 0.0], &[1.0, 1.0], 0.0);
        assert!(blocked.column(1).iter().all(|&x| x == 0.0));

        let base = BaseTransition(uniform.clone());
        let neutral = adjust(
            &base,
            &[1.0, 1.0],
            &[1.0, 1.0],
            &TransitionConfig::default(),
        );
        let third = 1.0 / 3.0;
        assert_rows_close(neutral.as_array(), &vec![vec![third; 3]; 3], 1e-8);
    }

    #[test]
    fn fully_blocked_row_keeps_base() {
        let base = array![[0.0, 1.0], [0.5, 0.5]];
        let block = adjust_step_block(&base, &[1.0, 0.0], &[1.0, 1.0], 0.0);
        assert_eq!(block.row(0).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn unconstrained_none_with_no_dependencies_is_uniform() {
        let config = TransitionConfig {
            none: NoneTransitions::Unconstrained,
            ..Default::default()
        };
        let model = TransitionModel::new(DependencyMatrix::zeros(2), config);
        let adjusted = model.adjusted(&ProgressTracker::new(2));
        assert!(adjusted
            .as_array()
            .iter()
            .all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn tracker_keeps_running_max() {
        let mut tracker = ProgressTracker::new(1);
        let mut trace = Vec::new();
        for p in [0.2, 0.9, 0.5] {
            tracker.observe(&[p]).unwrap();
            trace.push(tracker.values()[0]);
        }
        assert_eq!(trace, vec![0.2, 0.9, 0.9]);

        let tracker = ProgressTracker::from_values(vec![0.3]).unwrap();
        assert_eq!(observe_progress(&tracker, &[0.1]).unwrap().values(), &[0.3]);
        assert_eq!(observe_progress(&tracker, &[0.7]).unwrap().values(), &[0.7]);
        assert!(matches!(
            observe_progress(&tracker, &[1.5]),
            Err(TransitionError::OutOfRangeProgress { step: 0, .. })
        ));
        assert!(matches!(
            observe_progress(&tracker, &[0.1, 0.2]),
            Err(TransitionError::LengthMismatch { .. })
        ));
    }
}
