//! Temporal segments from per-step belief columns by 1D scale-space blob
//! detection with Laplacian-of-Gaussian filters.

use serde::{Deserialize, Serialize};

use crate::model::{AlignmentMatrix, SegmentTimeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleSpacing {
    #[default]
    Log,
    Linear,
}

/// Standard deviations, in segments, at which the signal is filtered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    sigmas: Vec<f64>,
}

impl ScaleSet {
    pub const DEFAULT_COUNT: usize = 13;
    pub const DEFAULT_MIN: f64 = 1.0;
    pub const DEFAULT_MAX: f64 = 480.0;

    /// `count` scales from `min` to `max` inclusive. Endpoints are exact.
    pub fn new(spacing: ScaleSpacing, count: usize, min: f64, max: f64) -> Self {
        assert!(count >= 1 && min > 0.0 && max >= min, "invalid scale range");
        if count == 1 {
            return Self { sigmas: vec![min] };
        }
        let last = (count - 1) as f64;
        let mut sigmas: Vec<f64> = (0..count)
            .map(|k| {
                let f = k as f64 / last;
                match spacing {
                    ScaleSpacing::Log => min * (max / min).powf(f),
                    ScaleSpacing::Linear => min + (max - min) * f,
                }
            })
            .collect();
        sigmas[0] = min;
        sigmas[count - 1] = max;
        Self { sigmas }
    }

    pub fn from_sigmas(mut sigmas: Vec<f64>) -> Self {
        assert!(
            sigmas.iter().all(|s| *s > 0.0 && s.is_finite()),
            "scales must be positive"
        );
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        Self { sigmas }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self::new(
            ScaleSpacing::Log,
            Self::DEFAULT_COUNT,
            Self::DEFAULT_MIN,
            Self::DEFAULT_MAX,
        )
    }
}

/// How two blob extents are compared during suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMeasure {
    /// Intersection over the shorter extent.
    #[default]
    Smaller,
    /// Intersection over union.
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    pub scales: ScaleSet,
    /// Minimum negated response for a blob to be kept.
    pub threshold: f64,
    /// Blobs overlapping a stronger one by more than this are dropped.
    pub nms_overlap: f64,
    pub overlap_measure: OverlapMeasure,
    /// Maxima whose scale-normalized gradient magnitude reaches this
    /// fraction of their response sit on a step edge and are dropped.
    /// Infinity keeps every maximum.
    pub edge_ratio: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            scales: ScaleSet::default(),
            threshold: 1e-3,
            nms_overlap: 0.5,
            overlap_measure: OverlapMeasure::default(),
            edge_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: usize,
    pub sigma: f64,
    /// Negated LoG response; positive for bright blobs.
    pub response: f64,
}

impl Blob {
    pub fn radius(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.sigma
    }

    pub fn extent(&self) -> (f64, f64) {
        let c = self.center as f64;
        (c - self.radius(), c + self.radius())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedSegment {
    pub step: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
}

impl DetectedSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Second derivative of the unit-mass Gaussian, sampled on `-r..=r` with
/// `r = ceil(4σ)`, shifted to sum to zero and multiplied by `σ²`.
pub fn log_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let s2 = sigma * sigma;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| {
            let x2 = (x * x) as f64;
            norm * (-x2 / (2.0 * s2)).exp() * (x2 / (s2 * s2) - 1.0 / s2)
        })
        .collect();
    let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
    for k in &mut kernel {
        *k = (*k - mean) * s2;
    }
    kernel
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`) of an index into
/// `0..len`; periodic in `2·len`, so any offset is valid.
fn reflect(index: i64, len: usize) -> usize {
    let period = 2 * len as i64;
    let m = index.rem_euclid(period) as usize;
    if m < len {
        m
    } else {
        2 * len - 1 - m
    }
}

/// Scale-normalized LoG response of `signal` at scale `sigma`.
pub fn log_response(signal: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let kernel = log_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * signal[reflect(i + k as i64 - radius, n)])
                .sum()
        })
        .collect()
}

/// Scale-normalized Gaussian derivative response `σ·(signal ∗ G'_σ)` at
/// one position, with the same padding and truncation as the LoG.
pub fn gradient_at(signal: &[f64], sigma: f64, index: usize) -> f64 {
    let n = signal.len();
    let radius = (4.0 * sigma).ceil() as i64;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let s2 = sigma * sigma;
    let sum: f64 = (-radius..=radius)
        .map(|x| {
            let xf = x as f64;
            let w = -xf / s2 * norm * (-xf * xf / (2.0 * s2)).exp();
            w * signal[reflect(index as i64 - x, n)]
        })
        .sum();
    sigma * sum
}

fn overlap(a: &Blob, b: &Blob, measure: OverlapMeasure) -> f64 {
    let (a0, a1) = a.extent();
    let (b0, b1) = b.extent();
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let denom = match measure {
        OverlapMeasure::Smaller => (a1 - a0).min(b1 - b0),
        OverlapMeasure::Iou => (a1 - a0) + (b1 - b0) - inter,
    };
    if denom > 0.0 {
        inter / denom
    } else {
        0.0
    }
}

fn strength_order(a: &Blob, b: &Blob) -> std::cmp::Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.center.cmp(&b.center))
        .then(a.sigma.total_cmp(&b.sigma))
}

/// Greedy suppression in order of decreasing response. The result is in
/// that order, so applying it again is a no-op.
pub fn suppress(mut blobs: Vec<Blob>, max_overlap: f64, measure: OverlapMeasure) -> Vec<Blob> {
    blobs.sort_by(strength_order);
    let mut kept: Vec<Blob> = Vec::with_capacity(blobs.len());
    for blob in blobs {
        if kept
            .iter()
            .all(|k| overlap(k, &blob, measure) <= max_overlap)
        {
            kept.push(blob);
        }
    }
    kept
}

/// Vertex of the parabola through three points, clamped to their span.
fn parabola_peak(x: [f64; 3], y: [f64; 3]) -> f64 {
    let (a, b) = (x[1] - x[0], x[1] - x[2]);
    let (fa, fb) = (y[1] - y[2], y[1] - y[0]);
    let denom = a * fa - b * fb;
    if denom == 0.0 {
        return x[1];
    }
    (x[1] - 0.5 * (a * a * fa - b * b * fb) / denom).clamp(x[0], x[2])
}

/// Bright blobs of `signal`: maxima of the negated response over a 3×3
/// position-by-scale neighborhood, above the threshold, off step edges,
/// after suppression.
///
/// Scales whose blob would be wider than the signal are skipped, apart
/// from the smallest, since reflection makes their responses mirror
/// artifacts. Interior maxima get their scale refined by a parabola
/// through the three responses at the center, in log-scale.
pub fn detect_blobs(signal: &[f64], config: &LocalizationConfig) -> Vec<Blob> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let all = config.scales.sigmas();
    let admissible = all
        .iter()
        .skip(1)
        .take_while(|s| 2.0 * std::f64::consts::SQRT_2 * **s <= n as f64)
        .count()
        + 1;
    let sigmas = &all[..admissible];
    let stack: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| log_response(signal, s).into_iter().map(|r| -r).collect())
        .collect();
    let mut candidates = Vec::new();
    for (si, row) in stack.iter().enumerate() {
        for (t, &value) in row.iter().enumerate() {
            if value.is_nan() || value <= config.threshold {
                continue;
            }
            let dominant = (si.saturating_sub(1)..=(si + 1).min(sigmas.len() - 1)).all(|sj| {
                (t.saturating_sub(1)..=(t + 1).min(n - 1)).all(|u| stack[sj][u] <= value)
            });
            let edge = config.edge_ratio.is_finite()
                && gradient_at(signal, sigmas[si], t).abs() >= config.edge_ratio * value;
            if !dominant || edge {
                continue;
            }
            let sigma = if si > 0 && si + 1 < sigmas.len() {
                let x = [sigmas[si - 1].ln(), sigmas[si].ln(), sigmas[si + 1].ln()];
                let y = [stack[si - 1][t], value, stack[si + 1][t]];
                parabola_peak(x, y).exp()
            } else {
                sigmas[si]
            };
            candidates.push(Blob {
                center: t,
                sigma,
                response: value,
            });
        }
    }
    suppress(candidates, config.nms_overlap, config.overlap_measure)
}

/// Converts blobs of one step's belief column into timed segments.
///
/// Extents are `center ± √2σ` in segment units, clamped to the signal, and
/// mapped to seconds by multiplying with the segment duration.
pub fn blobs_to_segments(
    blobs: &[Blob],
    step: usize,
    belief_column: &[f64],
    segment_duration_s: f64,
) -> Vec<DetectedSegment> {
    let n = belief_column.len();
    blobs
        .iter()
        .filter(|b| b.center < n)
        .map(|b| {
            let (lo, hi) = b.extent();
            let lo = lo.max(0.0);
            let hi = hi.min(n as f64);
            let first = lo.ceil() as usize;
            let last = (hi.floor() as usize).min(n - 1);
            let covered = &belief_column[first..=last];
            let confidence = covered.iter().sum::<f64>() / covered.len() as f64;
            DetectedSegment {
                step,
                start_s: lo * segment_duration_s,
                end_s: hi * segment_duration_s,
                confidence,
            }
        })
        .collect()
}

/// Detections for every step column of an alignment matrix; the "none"
/// column is skipped.
pub fn localize(
    matrix: &AlignmentMatrix,
    timeline: &SegmentTimeline,
    config: &LocalizationConfig,
) -> Vec<DetectedSegment> {
    let num_steps = matrix.num_states().saturating_sub(1);
    let mut out = Vec::new();
    for step in 0..num_steps {
        let column = matrix.column(step);
        let blobs = detect_blobs(&column, config);
        out.extend(blobs_to_segments(
            &blobs,
            step,
            &column,
            timeline.segment_duration_s,
        ));
    }
    out
}
