//! Recall@1, per-task averaged recall, and class-agnostic mAP over
//! temporal IoU thresholds.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localization::DetectedSegment;
use crate::model::{argmax, AlignmentMatrix, GroundTruthAnnotation, SegmentTimeline};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ground truth for video `{0}` has no annotated steps")]
    EmptyGroundTruth(String),
    #[error("alignment matrix has {actual} {what}, expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// Hits and evaluated steps of one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCount {
    pub hits: usize,
    pub steps: usize,
}

impl RecallCount {
    pub fn recall(&self) -> f64 {
        self.hits as f64 / self.steps as f64
    }
}

/// For each annotated step, whether the midpoint of its highest-scoring
/// segment (earliest on ties) falls in one of the step's intervals.
pub fn recall_count(
    matrix: &AlignmentMatrix,
    gt: &GroundTruthAnnotation,
    timeline: &SegmentTimeline,
) -> Result<RecallCount, MetricsError> {
    let steps = gt.distinct_steps();
    if steps.is_empty() {
        return Err(MetricsError::EmptyGroundTruth(gt.video_id.clone()));
    }
    if matrix.num_segments() != timeline.num_segments {
        return Err(MetricsError::ShapeMismatch {
            what: "segments",
            expected: timeline.num_segments,
            actual: matrix.num_segments(),
        });
    }
    let max_step = *steps.last().expect("non-empty");
    // The last column is "none" and is never scored.
    if matrix.num_states() < max_step + 2 {
        return Err(MetricsError::ShapeMismatch {
            what: "columns",
            expected: max_step + 2,
            actual: matrix.num_states(),
        });
    }
    let hits = steps
        .iter()
        .filter(|&&step| {
            let best = argmax(&matrix.column(step));
            let time = timeline.midpoint_s(best);
            gt.intervals_of(step).any(|iv| iv.contains(time))
        })
        .count();
    Ok(RecallCount {
        hits,
        steps: steps.len(),
    })
}

pub fn recall_at_1(
    matrix: &AlignmentMatrix,
    gt: &GroundTruthAnnotation,
    timeline: &SegmentTimeline,
) -> Result<f64, MetricsError> {
    recall_count(matrix, gt, timeline).map(|c| c.recall())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallAveraging {
    /// Mean over videos within a task, then over tasks.
    #[default]
    PerVideo,
    /// Hits over steps pooled within a task, then mean over tasks.
    StepPooled,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-task recall under the given averaging, keyed by task id.
pub fn per_task_recall(
    per_video: &[(String, RecallCount)],
    mode: RecallAveraging,
) -> BTreeMap<String, f64> {
    let mut grouped: BTreeMap<&str, Vec<RecallCount>> = BTreeMap::new();
    for (task, count) in per_video {
        grouped.entry(task.as_str()).or_default().push(*count);
    }
    grouped
        .into_iter()
        .map(|(task, counts)| {
            let value = match mode {
                RecallAveraging::PerVideo => mean(counts.iter().map(RecallCount::recall)),
                RecallAveraging::StepPooled => {
                    let hits: usize = counts.iter().map(|c| c.hits).sum();
                    let steps: usize = counts.iter().map(|c| c.steps).sum();
                    hits as f64 / steps as f64
                }
            };
            (task.to_string(), value)
        })
        .collect()
}

/// Mean over videos within each task, then unweighted mean over tasks.
pub fn avg_recall_at_1(per_video: &[(String, f64)]) -> f64 {
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (task, r) in per_video {
        grouped.entry(task.as_str()).or_default().push(*r);
    }
    mean(grouped.into_values().map(mean))
}

/// Temporal intersection over union; zero for disjoint intervals.
pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApInterpolation {
    /// Exact area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.01, ..., 1.
    Point101,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub video_id: String,
    pub step: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
}

impl ScoredDetection {
    pub fn from_segment(video_id: &str, seg: &DetectedSegment) -> Self {
        Self {
            video_id: video_id.to_string(),
            step: seg.step,
            start_s: seg.start_s,
            end_s: seg.end_s,
            confidence: seg.confidence,
        }
    }

    fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub step: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Detections and ground truth of every video of one activity (task).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivityDetections {
    pub activity: String,
    pub detections: Vec<ScoredDetection>,
    pub ground_truth: Vec<GroundTruthInstance>,
}

impl ActivityDetections {
    pub fn add_video(&mut self, gt: &GroundTruthAnnotation, detections: &[DetectedSegment]) {
        self.ground_truth
            .extend(gt.segments.iter().map(|s| GroundTruthInstance {
                video_id: gt.video_id.clone(),
                step: s.step,
                start_s: s.start_s,
                end_s: s.end_s,
            }));
        self.detections.extend(
            detections
                .iter()
                .map(|d| ScoredDetection::from_segment(&gt.video_id, d)),
        );
    }
}

/// Confidence descending, then longer first, then by identity so the
/// order never depends on input order.
fn detection_order(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(b.duration().total_cmp(&a.duration()))
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.step.cmp(&b.step))
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.end_s.total_cmp(&b.end_s))
}

fn gt_order(a: &GroundTruthInstance, b: &GroundTruthInstance) -> Ordering {
    a.video_id
        .cmp(&b.video_id)
        .then(a.step.cmp(&b.step))
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.end_s.total_cmp(&b.end_s))
}

/// Average precision of one activity at IoU threshold `tau`. Returns
/// `None` when the activity has no ground truth.
pub fn average_precision(
    activity: &ActivityDetections,
    tau: f64,
    interpolation: ApInterpolation,
) -> Option<f64> {
    let mut gts: Vec<&GroundTruthInstance> = activity.ground_truth.iter().collect();
    if gts.is_empty() {
        return None;
    }
    gts.sort_by(|a, b| gt_order(a, b));
    let mut dets: Vec<&ScoredDetection> = activity.detections.iter().collect();
    dets.sort_by(|a, b| detection_order(a, b));

    let mut matched = vec![false; gts.len()];
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (rank, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] || gt.video_id != det.video_id || gt.step != det.step {
                continue;
            }
            let overlap = iou((det.start_s, det.end_s), (gt.start_s, gt.end_s));
            if overlap >= tau && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    Some(match interpolation {
        ApInterpolation::AllPoint => all_point_ap(&precision, &recall),
        ApInterpolation::Point101 => point101_ap(&precision, &recall),
    })
}

fn all_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut mpre: Vec<f64> = std::iter::once(0.0)
        .chain(precision.iter().copied())
        .chain(std::iter::once(0.0))
        .collect();
    let mrec: Vec<f64> = std::iter::once(0.0)
        .chain(recall.iter().copied())
        .chain(std::iter::once(1.0))
        .collect();
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

fn point101_ap(precision: &[f64], recall: &[f64]) -> f64 {
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            precision
                .iter()
                .zip(recall)
                .filter(|(_, &rec)| rec >= r)
                .map(|(&p, _)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Unweighted mean of per-activity AP over activities with ground truth;
/// zero when there are none.
pub fn map_at_iou(
    activities: &[ActivityDetections],
    tau: f64,
    interpolation: ApInterpolation,
) -> f64 {
    mean(
        activities
            .iter()
            .filter_map(|a| average_precision(a, tau, interpolation)),
    )
}

/// Thresholds reported individually, and the range averaged into the mean.
pub const REPORTED_IOUS: [f64; 3] = [0.3, 0.5, 0.7];
pub const AVERAGED_IOUS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub averaging: RecallAveraging,
    pub interpolation: ApInterpolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub task_id: String,
    pub recall: RecallCount,
    pub recall_at_1: f64,
    /// Recall of the raw per-segment observation argmax, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline_recall_at_1: Option<f64>,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapAtIou {
    pub iou: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: MetricsConfig,
    pub per_video: Vec<VideoMetrics>,
    pub per_task_recall_at_1: BTreeMap<String, f64>,
    /// Mean R@1 over all videos.
    pub recall_at_1: f64,
    pub avg_recall_at_1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline_recall_at_1: Option<f64>,
    pub map: Vec<MapAtIou>,
    pub map_mean: f64,
    pub num_videos: usize,
    pub num_tasks: usize,
    pub num_steps: usize,
}

impl EvalReport {
    pub fn build(
        mut per_video: Vec<VideoMetrics>,
        activities: &[ActivityDetections],
        config: MetricsConfig,
    ) -> Self {
        per_video.sort_by(|a, b| a.task_id.cmp(&b.task_id).then(a.video_id.cmp(&b.video_id)));
        let counts: Vec<(String, RecallCount)> = per_video
            .iter()
            .map(|v| (v.task_id.clone(), v.recall))
            .collect();
        let per_task = per_task_recall(&counts, config.averaging);
        let baseline = if !per_video.is_empty()
            && per_video.iter().all(|v| v.baseline_recall_at_1.is_some())
        {
            Some(mean(
                per_video.iter().filter_map(|v| v.baseline_recall_at_1),
            ))
        } else {
            None
        };
        let map_at = |tau| map_at_iou(activities, tau, config.interpolation);
        Self {
            config,
            recall_at_1: mean(per_video.iter().map(|v| v.recall_at_1)),
            avg_recall_at_1: mean(per_task.values().copied()),
            baseline_recall_at_1: baseline,
            map: REPORTED_IOUS
                .iter()
                .map(|&iou| MapAtIou {
                    iou,
                    map: map_at(iou),
                })
                .collect(),
            map_mean: mean(AVERAGED_IOUS.iter().map(|&t| map_at(t))),
            num_videos: per_video.len(),
            num_tasks: per_task.len(),
            num_steps: per_video.iter().map(|v| v.recall.steps).sum(),
            per_task_recall_at_1: per_task,
            per_video,
        }
    }

    /// Long-format rows `scope,key,metric,value`.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut rows: Vec<[String; 4]> = Vec::new();
        let mut row = |scope: &str, key: &str, metric: &str, value: f64| {
            rows.push([scope.into(), key.into(), metric.into(), value.to_string()]);
        };
        row("overall", "", "recall_at_1", self.recall_at_1);
        row("overall", "", "avg_recall_at_1", self.avg_recall_at_1);
        if let Some(b) = self.baseline_recall_at_1 {
            row("overall", "", "baseline_recall_at_1", b);
        }
        for m in &self.map {
            row("overall", "", &format!("map@{}", m.iou), m.map);
        }
        row("overall", "", "map_mean", self.map_mean);
        for (task, r) in &self.per_task_recall_at_1 {
            row("task", task, "recall_at_1", *r);
        }
        for v in &self.per_video {
            row("video", &v.video_id, "recall_at_1", v.recall_at_1);
            if let Some(b) = v.baseline_recall_at_1 {
                row("video", &v.video_id, "baseline_recall_at_1", b);
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "key", "metric", "value"])?;
        for r in &rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Plain-text table with values scaled by 100.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut header = vec!["R@1".to_string(), "Avg R@1".to_string()];
        let mut values = vec![pct(self.recall_at_1), pct(self.avg_recall_at_1)];
        if let Some(b) = self.baseline_recall_at_1 {
            header.push("Baseline R@1".into());
            values.push(pct(b));
        }
        for m in &self.map {
            header.push(format!("mAP@{}", m.iou));
            values.push(pct(m.map));
        }
        header.push("mAP avg".into());
        values.push(pct(self.map_mean));
        let widths: Vec<usize> = header
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(&header));
        let _ = writeln!(
            out,
            "{}",
            widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("-|-")
        );
        let _ = writeln!(out, "{}", line(&values));
        let _ = writeln!(
            out,
            "\n{} videos, {} tasks, {} annotated steps",
            self.num_videos, self.num_tasks, self.num_steps
        );
        out
    }
}
