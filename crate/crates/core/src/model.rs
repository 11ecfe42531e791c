//! Domain types shared by every stage of the pipeline.
//!
//! All probability vectors carry one entry per task step plus a trailing
//! "none of the above" entry at index `S`. Constructors validate and never
//! normalize; [`renormalize`] is the single place where mass is rescaled.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum deviation of a vector sum from 1 accepted by simplex constructors.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Number of progress tokens (`0..=9`) scored for each step.
pub const PROGRESS_LEVELS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("task `{task_id}` has no steps")]
    EmptySteps { task_id: String },
    #[error("step index {index} appears more than once in field `{field}`")]
    DuplicateStepIndex { field: String, index: usize },
    #[error("malformed record field `{field}`: {reason}")]
    MalformedRecord { field: String, reason: String },
    #[error(
        "durations must be positive (video length {video_length_s}, segment {segment_duration_s})"
    )]
    NonPositiveDuration {
        video_length_s: f64,
        segment_duration_s: f64,
    },
    #[error("{kind} is not a probability simplex: {reason}")]
    NotSimplex { kind: &'static str, reason: String },
    #[error("expected {kind} of length {expected}, got {actual}")]
    LengthMismatch {
        kind: &'static str,
        expected: usize,
        actual: usize,
    },
}

fn malformed(field: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::MalformedRecord {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Rescales non-negative weights to sum to one.
///
/// Returns `None` when the weights are empty, contain a negative or
/// non-finite entry, or sum to zero.
pub fn renormalize(weights: &[f64]) -> Option<Vec<f64>> {
    if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return None;
    }
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return None;
    }
    Some(weights.iter().map(|w| w / total).collect())
}

fn check_simplex(kind: &'static str, values: &[f64]) -> Result<(), ModelError> {
    if values.is_empty() {
        return Err(ModelError::NotSimplex {
            kind,
            reason: "empty vector".into(),
        });
    }
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(ModelError::NotSimplex {
            kind,
            reason: format!("entry {i} = {v} outside [0, 1]"),
        });
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(ModelError::NotSimplex {
            kind,
            reason: format!("entries sum to {sum}"),
        });
    }
    Ok(())
}

macro_rules! simplex_newtype {
    ($(#[$meta:meta])* $name:ident, $kind:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
                check_simplex($kind, &values)?;
                Ok(Self(values))
            }

            /// Builds the simplex from arbitrary non-negative weights.
            pub fn from_weights(weights: &[f64]) -> Result<Self, ModelError> {
                renormalize(weights).map(Self).ok_or_else(|| ModelError::NotSimplex {
                    kind: $kind,
                    reason: "weights cannot be normalized".into(),
                })
            }

            pub fn uniform(len: usize) -> Self {
                Self(vec![1.0 / len as f64; len])
            }

            pub fn one_hot(len: usize, index: usize) -> Self {
                let mut values = vec![0.0; len];
                values[index] = 1.0;
                Self(values)
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            /// Index of the largest entry; ties go to the lowest index.
            pub fn argmax(&self) -> usize {
                argmax(&self.0)
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = f64;
            fn index(&self, index: usize) -> &f64 {
                &self.0[index]
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let values = Vec::<f64>::deserialize(d)?;
                Self::new(values).map_err(serde::de::Error::custom)
            }
        }
    };
}

simplex_newtype!(
    /// Per-segment scores over the `S` steps and the trailing "none" class.
    ObservationScores,
    "observation scores"
);
simplex_newtype!(
    /// Distribution over the ten progress tokens `0..=9` for one step.
    ProgressDistribution,
    "progress distribution"
);
simplex_newtype!(
    /// Filter posterior over the `S` steps and the "none" state.
    Belief,
    "belief"
);

/// Index of the largest entry, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A step list entry as it appears in a task file: either a bare
/// description or an explicitly indexed one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepRecord {
    Text(String),
    Indexed { index: usize, text: String },
}

/// Raw task file contents prior to validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    #[serde(default)]
    pub task_id: Option<String>,
    pub goal: Option<String>,
    pub steps: Option<Vec<StepRecord>>,
}

/// A procedural task: a goal and its ordered step descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub goal: String,
    pub steps: Vec<String>,
}

impl TaskSpec {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Number of filter states, i.e. steps plus "none".
    pub fn num_states(&self) -> usize {
        self.steps.len() + 1
    }
}

/// Validates a parsed task record.
pub fn validate_task(raw: TaskRecord) -> Result<TaskSpec, ModelError> {
    let task_id = raw.task_id.unwrap_or_default();
    let goal = raw.goal.ok_or_else(|| malformed("goal", "missing"))?;
    let steps = raw.steps.ok_or_else(|| malformed("steps", "missing"))?;
    if steps.is_empty() {
        return Err(ModelError::EmptySteps { task_id });
    }

    let explicit = steps
        .iter()
        .any(|s| matches!(s, StepRecord::Indexed { .. }));
    let mut slots: Vec<Option<String>> = vec![None; steps.len()];
    if explicit {
        let mut seen = HashSet::new();
        for (pos, step) in steps.into_iter().enumerate() {
            let StepRecord::Indexed { index, text } = step else {
                return Err(malformed(
                    format!("steps[{pos}]"),
                    "mixes indexed and bare step entries",
                ));
            };
            if !seen.insert(index) {
                return Err(ModelError::DuplicateStepIndex {
                    field: format!("steps[{pos}].index"),
                    index,
                });
            }
            let len = slots.len();
            let slot = slots.get_mut(index).ok_or_else(|| {
                malformed(
                    format!("steps[{pos}].index"),
                    format!("index {index} is not dense over 0..{len}"),
                )
            })?;
            *slot = Some(text);
        }
    } else {
        for (slot, step) in slots.iter_mut().zip(steps) {
            if let StepRecord::Text(text) = step {
                *slot = Some(text);
            }
        }
    }

    let mut out = Vec::with_capacity(slots.len());
    for (i, slot) in slots.into_iter().enumerate() {
        let text = slot.ok_or_else(|| malformed(format!("steps[{i}]"), "missing index"))?;
        if text.trim().is_empty() {
            return Err(malformed(format!("steps[{i}]"), "empty step description"));
        }
        out.push(text);
    }
    Ok(TaskSpec {
        task_id,
        goal,
        steps: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentRounding {
    Floor,
    #[default]
    Ceil,
}

/// Fixed-length, contiguous, non-overlapping segmentation of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTimeline {
    pub video_id: String,
    pub segment_duration_s: f64,
    pub num_segments: usize,
}

impl SegmentTimeline {
    pub fn new(
        video_id: impl Into<String>,
        segment_duration_s: f64,
        num_segments: usize,
    ) -> Result<Self, ModelError> {
        if !(segment_duration_s.is_finite() && segment_duration_s > 0.0) {
            return Err(ModelError::NonPositiveDuration {
                video_length_s: f64::NAN,
                segment_duration_s,
            });
        }
        if num_segments == 0 {
            return Err(malformed("num_segments", "must be at least 1"));
        }
        Ok(Self {
            video_id: video_id.into(),
            segment_duration_s,
            num_segments,
        })
    }

    pub fn start_s(&self, t: usize) -> f64 {
        t as f64 * self.segment_duration_s
    }

    pub fn end_s(&self, t: usize) -> f64 {
        (t + 1) as f64 * self.segment_duration_s
    }

    pub fn midpoint_s(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.segment_duration_s
    }
}

/// Segments a video of the given length.
///
/// Ratios within 1e-9 of an integer are snapped so that exact divisions
/// survive floating-point noise. At least one segment is always produced.
pub fn timeline_from_duration(
    video_id: impl Into<String>,
    video_length_s: f64,
    segment_duration_s: f64,
    rounding: SegmentRounding,
) -> Result<SegmentTimeline, ModelError> {
    let valid = |x: f64| x > 0.0 && x.is_finite();
    if !valid(video_length_s) || !valid(segment_duration_s) {
        return Err(ModelError::NonPositiveDuration {
            video_length_s,
            segment_duration_s,
        });
    }
    let ratio = video_length_s / segment_duration_s;
    let nearest = ratio.round();
    let count = if (ratio - nearest).abs() < 1e-9 {
        nearest
    } else {
        match rounding {
            SegmentRounding::Ceil => ratio.ceil(),
            SegmentRounding::Floor => ratio.floor(),
        }
    };
    Ok(SegmentTimeline {
        video_id: video_id.into(),
        segment_duration_s,
        num_segments: (count as usize).max(1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInterval {
    pub step: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl StepInterval {
    pub fn contains(&self, time_s: f64) -> bool {
        self.start_s <= time_s && time_s <= self.end_s
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Ground-truth step intervals for one video, in the canonical annotation
/// file shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub video_id: String,
    #[serde(default)]
    pub task_id: String,
    pub length_s: f64,
    pub segments: Vec<StepInterval>,
}

impl GroundTruthAnnotation {
    /// Checks interval ordering and that every step index is below `num_steps`.
    pub fn validate(&self, num_steps: usize) -> Result<(), ModelError> {
        for (k, seg) in self.segments.iter().enumerate() {
            if !(seg.start_s >= 0.0 && seg.start_s < seg.end_s) {
                return Err(malformed(
                    format!("segments[{k}]"),
                    format!("invalid interval [{}, {}]", seg.start_s, seg.end_s),
                ));
            }
            if seg.step >= num_steps {
                return Err(malformed(
                    format!("segments[{k}].step"),
                    format!("step {} out of range for {num_steps} steps", seg.step),
                ));
            }
        }
        Ok(())
    }

    /// Distinct annotated steps, in ascending index order.
    pub fn distinct_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.segments.iter().map(|s| s.step).collect();
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    pub fn intervals_of(&self, step: usize) -> impl Iterator<Item = &StepInterval> {
        self.segments.iter().filter(move |s| s.step == step)
    }

    /// Earliest start time of each step that appears in the annotation.
    pub fn first_starts(&self, num_steps: usize) -> Vec<Option<f64>> {
        let mut first = vec![None; num_steps];
        for seg in &self.segments {
            if let Some(slot) = first.get_mut(seg.step) {
                let current: Option<f64> = *slot;
                *slot = Some(current.map_or(seg.start_s, |s| s.min(seg.start_s)));
            }
        }
        first
    }
}

/// One belief row per processed segment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    rows: Vec<Belief>,
}

impl AlignmentMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Belief>) -> Result<Self, ModelError> {
        if let Some(first) = rows.first() {
            let width = first.len();
            if let Some(bad) = rows.iter().find(|r| r.len() != width) {
                return Err(ModelError::LengthMismatch {
                    kind: "alignment row",
                    expected: width,
                    actual: bad.len(),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn push(&mut self, row: Belief) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Belief] {
        &self.rows
    }

    pub fn num_segments(&self) -> usize {
        self.rows.len()
    }

    /// Width of each row (steps plus "none"), zero when empty.
    pub fn num_states(&self) -> usize {
        self.rows.first().map_or(0, Belief::len)
    }

    pub fn column(&self, state: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[state]).collect()
    }
}
