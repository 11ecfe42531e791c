//! Observations derived from ground-truth annotations, with optional label
//! noise. Used for oracle experiments and for exercising the pipeline
//! without a model endpoint.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    GroundTruthAnnotation, ObservationScores, ProgressDistribution, SegmentTimeline, StepInterval,
    TaskSpec, PROGRESS_LEVELS,
};

use super::{ObservationProvider, ProviderError, SegmentRequest};

const STREAM_VSG: u64 = 0;
const STREAM_NEXT: u64 = 1;

/// 64-bit FNV-1a, used to give every video its own random streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Class covering `time_s`: the annotated step whose interval contains it
/// (the latest-starting one if several do), else "none" (`num_steps`).
pub fn true_class_at(annotation: &GroundTruthAnnotation, num_steps: usize, time_s: f64) -> usize {
    annotation
        .segments
        .iter()
        .filter(|iv| iv.start_s <= time_s && time_s < iv.end_s)
        .max_by(|a, b| a.start_s.total_cmp(&b.start_s).then(b.step.cmp(&a.step)))
        .map_or(num_steps, |iv| iv.step)
}

/// Fraction of `interval` elapsed at `time_s`, clamped to `[0, 1]`.
pub fn completion_fraction(interval: &StepInterval, time_s: f64) -> f64 {
    ((time_s - interval.start_s) / interval.duration_s()).clamp(0.0, 1.0)
}

/// Progress distribution whose expectation encodes `fraction`, split
/// between the two nearest tokens.
pub fn progress_distribution_for(fraction: f64) -> ProgressDistribution {
    let top = (PROGRESS_LEVELS - 1) as f64;
    let x = fraction.clamp(0.0, 1.0) * top;
    let lo = x.floor().min(top - 1.0);
    let w = x - lo;
    let mut values = vec![0.0; PROGRESS_LEVELS];
    values[lo as usize] = 1.0 - w;
    values[lo as usize + 1] += w;
    ProgressDistribution::new(values).expect("two-point distribution is a simplex")
}

#[derive(Debug, Clone)]
struct SyntheticVideo {
    annotation: GroundTruthAnnotation,
    timeline: SegmentTimeline,
}

/// Oracle observations: scores one-hot on the annotated class, replaced by
/// a uniformly drawn wrong class with probability `noise`; progress is the
/// completed fraction of the step's interval at the segment midpoint.
///
/// `smoothing` mixes each one-hot score with the uniform distribution,
/// `(1 - smoothing) * one_hot + smoothing / (S + 1)`.
#[derive(Debug, Clone)]
pub struct SyntheticOracleProvider {
    noise: f64,
    smoothing: f64,
    seed: u64,
    videos: HashMap<String, SyntheticVideo>,
}

impl SyntheticOracleProvider {
    pub fn new(noise: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&noise), "noise must lie in [0, 1]");
        Self {
            noise,
            smoothing: 0.0,
            seed,
            videos: HashMap::new(),
        }
    }

    pub fn with_smoothing(mut self, smoothing: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&smoothing),
            "smoothing must lie in [0, 1]"
        );
        self.smoothing = smoothing;
        self
    }

    pub fn add_video(&mut self, annotation: GroundTruthAnnotation, timeline: SegmentTimeline) {
        self.videos.insert(
            timeline.video_id.clone(),
            SyntheticVideo {
                annotation,
                timeline,
            },
        );
    }

    fn video(&self, req: &SegmentRequest<'_>) -> Result<&SyntheticVideo, ProviderError> {
        let video =
            self.videos
                .get(req.video_id)
                .ok_or_else(|| ProviderError::MissingObservation {
                    video_id: req.video_id.to_string(),
                    segment: req.segment,
                })?;
        if req.segment >= video.timeline.num_segments {
            return Err(ProviderError::MissingObservation {
                video_id: req.video_id.to_string(),
                segment: req.segment,
            });
        }
        Ok(video)
    }

    fn rng(&self, video_id: &str, segment: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(video_id.as_bytes()));
        rng.set_stream(segment as u64 * 2 + stream);
        rng
    }

    fn noisy_scores(
        &self,
        true_class: usize,
        states: usize,
        mut rng: impl RngCore,
    ) -> ObservationScores {
        let class = if states > 1 && rng.random::<f64>() < self.noise {
            let k = rng.random_range(0..states - 1);
            if k >= true_class {
                k + 1
            } else {
                k
            }
        } else {
            true_class
        };
        if self.smoothing == 0.0 {
            return ObservationScores::one_hot(states, class);
        }
        let floor = self.smoothing / states as f64;
        let weights: Vec<f64> = (0..states)
            .map(|i| {
                if i == class {
                    1.0 - self.smoothing + floor
                } else {
                    floor
                }
            })
            .collect();
        ObservationScores::from_weights(&weights).expect("smoothed one-hot is normalizable")
    }

    fn class_of_segment(&self, video: &SyntheticVideo, task: &TaskSpec, segment: usize) -> usize {
        true_class_at(
            &video.annotation,
            task.num_steps(),
            video.timeline.midpoint_s(segment),
        )
    }
}

impl ObservationProvider for SyntheticOracleProvider {
    fn vsg_scores(&self, req: &SegmentRequest<'_>) -> Result<ObservationScores, ProviderError> {
        let video = self.video(req)?;
        let class = self.class_of_segment(video, req.task, req.segment);
        let rng = self.rng(req.video_id, req.segment, STREAM_VSG);
        Ok(self.noisy_scores(class, req.task.num_states(), rng))
    }

    fn progress_scores(
        &self,
        req: &SegmentRequest<'_>,
        step: usize,
    ) -> Result<ProgressDistribution, ProviderError> {
        let video = self.video(req)?;
        let mid = video.timeline.midpoint_s(req.segment);
        // Latest occurrence that has started, else the first one.
        let interval = video
            .annotation
            .intervals_of(step)
            .filter(|iv| iv.start_s <= mid)
            .max_by(|a, b| a.start_s.total_cmp(&b.start_s))
            .or_else(|| {
                video
                    .annotation
                    .intervals_of(step)
                    .min_by(|a, b| a.start_s.total_cmp(&b.start_s))
            });
        let fraction = interval.map_or(0.0, |iv| completion_fraction(iv, mid));
        Ok(progress_distribution_for(fraction))
    }

    fn next_step_scores(
        &self,
        req: &SegmentRequest<'_>,
    ) -> Result<Option<ObservationScores>, ProviderError> {
        let video = self.video(req)?;
        let class = if req.segment + 1 < video.timeline.num_segments {
            self.class_of_segment(video, req.task, req.segment + 1)
        } else {
            req.task.num_steps()
        };
        let rng = self.rng(req.video_id, req.segment, STREAM_NEXT);
        Ok(Some(self.noisy_scores(class, req.task.num_states(), rng)))
    }
}

/// Shape of randomly generated procedural videos, in segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoShape {
    pub segment_duration_s: f64,
    pub min_step_segments: usize,
    pub max_step_segments: usize,
    pub max_gap_segments: usize,
    /// Probability that each step of the task is skipped in a video.
    pub skip_probability: f64,
}

impl Default for VideoShape {
    fn default() -> Self {
        Self {
            segment_duration_s: 2.0,
            min_step_segments: 3,
            max_step_segments: 8,
            max_gap_segments: 3,
            skip_probability: 0.2,
        }
    }
}

/// Generates a video whose steps follow task order (some skipped), each
/// step a single interval aligned to segment boundaries and separated by
/// background gaps.
pub fn generate_video(
    rng: &mut impl Rng,
    video_id: &str,
    task: &TaskSpec,
    shape: &VideoShape,
) -> (GroundTruthAnnotation, SegmentTimeline) {
    let d = shape.segment_duration_s;
    let mut steps: Vec<usize> = (0..task.num_steps())
        .filter(|_| rng.random::<f64>() >= shape.skip_probability)
        .collect();
    if steps.is_empty() {
        steps.push(rng.random_range(0..task.num_steps()));
    }
    let mut cursor = rng.random_range(0..=shape.max_gap_segments);
    let mut segments = Vec::with_capacity(steps.len());
    for step in steps {
        let len = rng.random_range(shape.min_step_segments..=shape.max_step_segments);
        segments.push(StepInterval {
            step,
            start_s: cursor as f64 * d,
            end_s: (cursor + len) as f64 * d,
        });
        cursor += len + rng.random_range(0..=shape.max_gap_segments);
    }
    let num_segments = cursor.max(1);
    let annotation = GroundTruthAnnotation {
        video_id: video_id.to_string(),
        task_id: task.task_id.clone(),
        length_s: num_segments as f64 * d,
        segments,
    };
    let timeline = SegmentTimeline::new(video_id, d, num_segments).expect("positive duration");
    (annotation, timeline)
}
