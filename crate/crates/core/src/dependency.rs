//! Step dependency matrices: construction, thresholding and consistency
//! checks against annotated videos.
//!
//! Entry `(i, j)` of a [`DependencyMatrix`] is the probability that step `j`
//! is a prerequisite of step `i`.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{debug, info};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_json, write_json_atomic, IoError};
use crate::model::{GroundTruthAnnotation, TaskSpec};
use crate::observation::ProviderError;

#[derive(Debug, Error)]
pub enum DependencyError {
    #[error("dependency matrix must be square with {expected} rows, got {rows}x{cols}")]
    DimensionMismatch {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("dependency entry ({row}, {col}) = {value} is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("dependency diagonal entry ({index}, {index}) must be zero, got {value}")]
    NonZeroDiagonal { index: usize, value: f64 },
    #[error("annotation for video `{video_id}` has no intervals")]
    EmptyAnnotation { video_id: String },
    #[error("dependency file is for task `{found}`, expected `{expected}`")]
    TaskMismatch { expected: String, found: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Soft prerequisite probabilities between the steps of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix(Array2<f64>);

impl DependencyMatrix {
    pub fn new(matrix: Array2<f64>) -> Result<Self, DependencyError> {
        let (rows, cols) = matrix.dim();
        if rows != cols || rows == 0 {
            return Err(DependencyError::DimensionMismatch {
                expected: rows.max(cols),
                rows,
                cols,
            });
        }
        for ((row, col), &value) in matrix.indexed_iter() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DependencyError::OutOfRange { row, col, value });
            }
            if row == col && value != 0.0 {
                return Err(DependencyError::NonZeroDiagonal { index: row, value });
            }
        }
        Ok(Self(matrix))
    }

    pub fn zeros(num_steps: usize) -> Self {
        Self(Array2::zeros((num_steps, num_steps)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DependencyError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(DependencyError::DimensionMismatch {
                expected: n,
                rows: n,
                cols: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let matrix = Array2::from_shape_vec((n, n), flat).expect("shape checked above");
        Self::new(matrix)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }

    pub fn num_steps(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    /// Probability that `prerequisite` must precede `step`.
    pub fn get(&self, step: usize, prerequisite: usize) -> f64 {
        self.0[(step, prerequisite)]
    }

    pub fn check_steps(&self, num_steps: usize) -> Result<(), DependencyError> {
        if self.num_steps() != num_steps {
            return Err(DependencyError::DimensionMismatch {
                expected: num_steps,
                rows: self.num_steps(),
                cols: self.num_steps(),
            });
        }
        Ok(())
    }
}

/// On-disk form of a dependency matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyFile {
    pub task_id: String,
    pub matrix: Vec<Vec<f64>>,
}

pub fn load_dependency_file(
    path: &Path,
    task: &TaskSpec,
) -> Result<DependencyMatrix, DependencyError> {
    let file: DependencyFile = read_json(path)?;
    if !task.task_id.is_empty() && !file.task_id.is_empty() && file.task_id != task.task_id {
        return Err(DependencyError::TaskMismatch {
            expected: task.task_id.clone(),
            found: file.task_id,
        });
    }
    let deps = DependencyMatrix::from_rows(&file.matrix)?;
    deps.check_steps(task.num_steps())?;
    Ok(deps)
}

pub fn save_dependency_file(
    path: &Path,
    task_id: &str,
    deps: &DependencyMatrix,
) -> Result<(), DependencyError> {
    let file = DependencyFile {
        task_id: task_id.to_string(),
        matrix: deps.to_rows(),
    };
    write_json_atomic(path, &file)?;
    Ok(())
}

/// Anything able to judge whether one step is required before another.
pub trait PrerequisiteScorer: Sync {
    /// Probability that `prerequisite` must be completed before `step`.
    fn prerequisite_probability(
        &self,
        goal: &str,
        step: &str,
        prerequisite: &str,
    ) -> Result<f64, ProviderError>;
}

/// Queries every ordered pair of distinct steps, with at most `concurrency`
/// requests in flight. Any failure aborts the whole build.
pub fn build_dependency_remote<S: PrerequisiteScorer + ?Sized>(
    task: &TaskSpec,
    scorer: &S,
    concurrency: usize,
) -> Result<DependencyMatrix, DependencyError> {
    let n = task.num_steps();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let results: Mutex<Vec<Option<f64>>> = Mutex::new(vec![None; pairs.len()]);
    let first_error: Mutex<Option<ProviderError>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = concurrency.max(1).min(pairs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, j)) = pairs.get(k) else { break };
                match scorer.prerequisite_probability(&task.goal, &task.steps[i], &task.steps[j]) {
                    Ok(p) => results.lock().unwrap()[k] = Some(p),
                    Err(e) => {
                        abort.store(true, Ordering::Relaxed);
                        first_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(err) = first_error.into_inner().unwrap() {
        return Err(err.into());
    }
    let mut matrix = Array2::zeros((n, n));
    for (&(i, j), p) in pairs.iter().zip(results.into_inner().unwrap()) {
        let p = p.expect("every pair is scored when no error occurred");
        if !(0.0..=1.0).contains(&p) {
            return Err(ProviderError::MalformedResponse {
                raw: format!("prerequisite probability {p} for pair ({i}, {j})"),
            }
            .into());
        }
        matrix[(i, j)] = p;
    }
    debug!(
        "scored {} prerequisite pairs for task `{}`",
        pairs.len(),
        task.task_id
    );
    DependencyMatrix::new(matrix)
}

/// Returns the cached matrix at `path` if present, otherwise builds it
/// remotely and persists it. Nothing is written when the build fails.
pub fn load_or_build_dependency<S: PrerequisiteScorer + ?Sized>(
    path: &Path,
    task: &TaskSpec,
    scorer: &S,
    concurrency: usize,
) -> Result<DependencyMatrix, DependencyError> {
    if path.exists() {
        return load_dependency_file(path, task);
    }
    info!("building dependency matrix for task `{}`", task.task_id);
    let deps = build_dependency_remote(task, scorer, concurrency)?;
    save_dependency_file(path, &task.task_id, &deps)?;
    Ok(deps)
}

/// Orders annotated steps by first occurrence and chains consecutive ones,
/// each step depending on the one before it.
pub fn build_dependency_chain_oracle(
    annotation: &GroundTruthAnnotation,
    num_steps: usize,
) -> Result<DependencyMatrix, DependencyError> {
    if annotation.segments.is_empty() {
        return Err(DependencyError::EmptyAnnotation {
            video_id: annotation.video_id.clone(),
        });
    }
    let mut order: Vec<(f64, usize)> = annotation
        .first_starts(num_steps)
        .into_iter()
        .enumerate()
        .filter_map(|(step, start)| start.map(|s| (s, step)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut matrix = Array2::zeros((num_steps, num_steps));
    for pair in order.windows(2) {
        let (prev, next) = (pair[0].1, pair[1].1);
        matrix[(next, prev)] = 1.0;
    }
    DependencyMatrix::new(matrix)
}

/// Hard dependencies obtained by thresholding a soft matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDependencies(Array2<bool>);

impl BinaryDependencies {
    pub fn new(matrix: Array2<bool>) -> Self {
        Self(matrix)
    }

    pub fn num_steps(&self) -> usize {
        self.0.nrows()
    }

    pub fn requires(&self, step: usize, prerequisite: usize) -> bool {
        self.0[(step, prerequisite)]
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.0
    }

    /// Declared `(step, prerequisite)` pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .indexed_iter()
            .filter(|(_, on)| **on)
            .map(|(idx, _)| idx)
    }

    /// Whether the relation contains a cycle (including self-loops).
    pub fn has_cycle(&self) -> bool {
        let n = self.num_steps();
        let mut reach = self.0.clone();
        for k in 0..n {
            for i in 0..n {
                if reach[(i, k)] {
                    for j in 0..n {
                        if reach[(k, j)] {
                            reach[(i, j)] = true;
                        }
                    }
                }
            }
        }
        (0..n).any(|i| reach[(i, i)])
    }
}

/// Keeps entries at or above `threshold`; at exactly zero only strictly
/// positive entries survive so that absent dependencies stay absent.
pub fn threshold_matrix(deps: &DependencyMatrix, threshold: f64) -> BinaryDependencies {
    let on = |v: f64| {
        if threshold == 0.0 {
            v > 0.0
        } else {
            v >= threshold
        }
    };
    BinaryDependencies(deps.as_array().mapv(on))
}

/// Hard dependencies and annotated videos of one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskAnnotations<'a> {
    pub task_id: &'a str,
    pub deps: &'a BinaryDependencies,
    pub annotations: &'a [GroundTruthAnnotation],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskViolations {
    pub task_id: String,
    pub declared: usize,
    pub violated: usize,
    /// Violated `(step, prerequisite)` pairs.
    pub violations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub threshold: f64,
    pub violated_dependency_fraction: f64,
    pub tasks_with_violation_fraction: f64,
    pub tasks: Vec<TaskViolations>,
}

/// Whether `step` starts strictly before `prerequisite` in a video where
/// both appear.
fn violated_in(ann: &GroundTruthAnnotation, step: usize, prerequisite: usize) -> bool {
    let first = |s: usize| {
        ann.intervals_of(s)
            .map(|iv| iv.start_s)
            .min_by(f64::total_cmp)
    };
    match (first(step), first(prerequisite)) {
        (Some(a), Some(b)) => a < b,
        _ => false,
    }
}

/// Counts declared dependencies contradicted by any annotated video.
///
/// The dependency fraction pools declared dependencies over all tasks; a
/// run with no declared dependencies reports zero.
pub fn analyze_violations(
    threshold: f64,
    tasks: &[TaskAnnotations<'_>],
) -> Result<ViolationStats, DependencyError> {
    let mut details = Vec::with_capacity(tasks.len());
    for task in tasks {
        let n = task.deps.num_steps();
        for ann in task.annotations {
            if let Some(bad) = ann.segments.iter().find(|s| s.step >= n) {
                return Err(DependencyError::DimensionMismatch {
                    expected: n,
                    rows: bad.step + 1,
                    cols: n,
                });
            }
        }
        let mut declared = 0;
        let mut violations = Vec::new();
        for (step, prereq) in task.deps.pairs() {
            declared += 1;
            if task
                .annotations
                .iter()
                .any(|ann| violated_in(ann, step, prereq))
            {
                violations.push((step, prereq));
            }
        }
        details.push(TaskViolations {
            task_id: task.task_id.to_string(),
            declared,
            violated: violations.len(),
            violations,
        });
    }

    let declared: usize = details.iter().map(|t| t.declared).sum();
    let violated: usize = details.iter().map(|t| t.violated).sum();
    let with_violation = details.iter().filter(|t| t.violated > 0).count();
    let fraction = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(ViolationStats {
        threshold,
        violated_dependency_fraction: fraction(violated, declared),
        tasks_with_violation_fraction: fraction(with_violation, details.len()),
        tasks: details,
    })
}

/// The eleven thresholds `0.0, 0.1, ..., 1.0`.
pub fn standard_thresholds() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Soft dependencies and annotated videos of one task.
#[derive(Debug, Clone, Copy)]
pub struct SoftTaskAnnotations<'a> {
    pub task_id: &'a str,
    pub deps: &'a DependencyMatrix,
    pub annotations: &'a [GroundTruthAnnotation],
}

/// Runs [`analyze_violations`] at every threshold.
pub fn sweep_violations(
    tasks: &[SoftTaskAnnotations<'_>],
    thresholds: &[f64],
) -> Result<Vec<ViolationStats>, DependencyError> {
    thresholds
        .iter()
        .map(|&theta| {
            let binaries: Vec<BinaryDependencies> = tasks
                .iter()
                .map(|t| threshold_matrix(t.deps, theta))
                .collect();
            let hard: Vec<TaskAnnotations<'_>> = tasks
                .iter()
                .zip(&binaries)
                .map(|(t, deps)| TaskAnnotations {
                    task_id: t.task_id,
                    deps,
                    annotations: t.annotations,
                })
                .collect();
            analyze_violations(theta, &hard)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepInterval;
    use ndarray::array;
    use std::sync::atomic::AtomicUsize;

    fn annotation(order: &[(usize, f64, f64)]) -> GroundTruthAnnotation {
        GroundTruthAnnotation {
            video_id: "v".into(),
            task_id: "t".into(),
            length_s: 100.0,
            segments: order
                .iter()
                .map(|&(step, start_s, end_s)| StepInterval {
                    step,
                    start_s,
                    end_s,
                })
                .collect(),
        }
    }

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            goal: "goal".into(),
            steps: (0..n).map(|i| format!("step {i}")).collect(),
        }
    }

    struct Table {
        calls: AtomicUsize,
        yes: Vec<(usize, usize)>,
        fail: bool,
    }

    impl PrerequisiteScorer for Table {
        fn prerequisite_probability(
            &self,
            _goal: &str,
            step: &str,
            prerequisite: &str,
        ) -> Result<f64, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail {
                return Err(ProviderError::Unavailable("timeout".into()));
            }
            let idx = |s: &str| s.trim_start_matches("step ").parse::<usize>().unwrap();
            let pair = (idx(step), idx(prerequisite));
            Ok(if self.yes.contains(&pair) { 1.0 } else { 0.0 })
        }
    }

    #[test]
    fn matrix_validation() {
        assert!(DependencyMatrix::new(array![[0.0, 0.5], [1.0, 0.0]]).is_ok());
        assert!(matches!(
            DependencyMatrix::new(array![[0.1, 0.5], [1.0, 0.0]]),
            Err(DependencyError::NonZeroDiagonal { index: 0, .. })
        ));
        assert!(matches!(
            DependencyMatrix::new(array![[0.0, 1.5], [1.0, 0.0]]),
            Err(DependencyError::OutOfRange { .. })
        ));
        assert!(DependencyMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn remote_build_queries_every_pair() {
        let scorer = Table {
            calls: AtomicUsize::new(0),
            yes: vec![(1, 0)],
            fail: false,
        };
        let deps = build_dependency_remote(&task(3), &scorer, 4).unwrap();
        assert_eq!(scorer.calls.load(Ordering::SeqCst), 6);
        assert_eq!(
            deps.to_rows(),
            vec![
                vec![0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0]
            ]
        );
    }

    #[test]
    fn remote_build_failure_persists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deps.json");
        let scorer = Table {
            calls: AtomicUsize::new(0),
            yes: vec![],
            fail: true,
        };
        let err = load_or_build_dependency(&path, &task(3), &scorer, 2).unwrap_err();
        assert!(matches!(
            err,
            DependencyError::Provider(ProviderError::Unavailable(_))
        ));
        assert!(!path.exists());
    }

    #[test]
    fn cached_matrix_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deps.json");
        let scorer = Table {
            calls: AtomicUsize::new(0),
            yes: vec![(2, 1)],
            fail: false,
        };
        let first = load_or_build_dependency(&path, &task(3), &scorer, 1).unwrap();
        let second = load_or_build_dependency(&path, &task(3), &scorer, 1).unwrap();
        assert_eq!(first, second);
        assert_eq!(scorer.calls.load(Ordering::SeqCst), 6);
        assert!(load_dependency_file(&path, &task(4)).is_err());
    }

    #[test]
    fn chain_oracle_examples() {
        let deps = build_dependency_chain_oracle(
            &annotation(&[(2, 0.0, 1.0), (0, 2.0, 3.0), (1, 4.0, 5.0)]),
            3,
        )
        .unwrap();
        assert_eq!(
            deps.to_rows(),
            vec![
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0]
            ]
        );

        let single = build_dependency_chain_oracle(&annotation(&[(1, 0.0, 1.0)]), 3).unwrap();
        assert_eq!(single, DependencyMatrix::zeros(3));

        let repeated = build_dependency_chain_oracle(
            &annotation(&[(0, 0.0, 1.0), (1, 2.0, 3.0), (0, 4.0, 5.0), (2, 6.0, 7.0)]),
            3,
        )
        .unwrap();
        assert_eq!(repeated.get(1, 0), 1.0);
        assert_eq!(repeated.get(2, 1), 1.0);
        assert_eq!(repeated.as_array().sum(), 2.0);

        assert!(matches!(
            build_dependency_chain_oracle(&annotation(&[]), 3),
            Err(DependencyError::EmptyAnnotation { .. })
        ));
    }

    #[test]
    fn thresholding_rules() {
        let deps = DependencyMatrix::new(array![[0.0, 0.5], [0.0, 0.0]]).unwrap();
        assert!(threshold_matrix(&deps, 0.5).requires(0, 1));
        assert!(!threshold_matrix(&deps, 0.0).requires(1, 0));
        assert!(threshold_matrix(&deps, 0.0).requires(0, 1));
        let high = DependencyMatrix::new(array![[0.0, 0.9], [0.9, 0.0]]).unwrap();
        assert_eq!(threshold_matrix(&high, 1.0).pairs().count(), 0);
    }

    #[test]
    fn violation_examples() {
        let ann = annotation(&[(0, 0.0, 1.0), (1, 2.0, 3.0)]);
        let chain = threshold_matrix(&build_dependency_chain_oracle(&ann, 2).unwrap(), 0.5);
        let anns = [ann.clone()];
        let stats = analyze_violations(
            0.5,
            &[TaskAnnotations {
                task_id: "t",
                deps: &chain,
                annotations: &anns,
            }],
        )
        .unwrap();
        assert_eq!(stats.violated_dependency_fraction, 0.0);
        assert_eq!(stats.tasks_with_violation_fraction, 0.0);

        // Step 0 declared to need step 1, but the video shows 0 first.
        let reversed = BinaryDependencies::new(array![[false, true], [false, false]]);
        let stats = analyze_violations(
            0.5,
            &[TaskAnnotations {
                task_id: "t",
                deps: &reversed,
                annotations: &anns,
            }],
        )
        .unwrap();
        assert_eq!(stats.violated_dependency_fraction, 1.0);
        assert_eq!(stats.tasks_with_violation_fraction, 1.0);
        assert_eq!(stats.tasks[0].violations, vec![(0, 1)]);

        let too_small = BinaryDependencies::new(Array2::from_elem((1, 1), false));
        assert!(matches!(
            analyze_violations(
                0.5,
                &[TaskAnnotations {
                    task_id: "t",
                    deps: &too_small,
                    annotations: &anns
                }]
            ),
            Err(DependencyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn violation_needs_both_steps_present() {
        let ann = annotation(&[(0, 0.0, 1.0)]);
        assert!(!violated_in(&ann, 0, 1));
        assert!(!violated_in(&ann, 1, 0));
    }

    #[test]
    fn chain_has_no_cycle() {
        let ann = annotation(&[(3, 0.0, 1.0), (0, 2.0, 3.0), (2, 4.0, 5.0), (1, 6.0, 7.0)]);
        let chain = threshold_matrix(&build_dependency_chain_oracle(&ann, 4).unwrap(), 0.5);
        assert!(!chain.has_cycle());
        let cyclic = BinaryDependencies::new(array![[false, true], [true, false]]);
        assert!(cyclic.has_cycle());
    }
}
