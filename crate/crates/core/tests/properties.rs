use ndarray::Array2;
use proptest::prelude::*;

use stepground::dependency::DependencyMatrix;
use stepground::filter::{FilterConfig, SegmentInput, StepFilter};
use stepground::localization::{detect_blobs, suppress, Blob, LocalizationConfig, OverlapMeasure};
use stepground::metrics::{
    average_precision, recall_at_1, ActivityDetections, ApInterpolation, GroundTruthInstance,
    ScoredDetection,
};
use stepground::model::{
    AlignmentMatrix, Belief, GroundTruthAnnotation, ObservationScores, SegmentTimeline,
    StepInterval, TaskSpec,
};
use stepground::transition::{
    adjust, init_transition, readiness, FixupRule, NoneTransitions, ProgressTracker,
    TransitionConfig,
};

fn deps_strategy(max_steps: usize) -> impl Strategy<Value = DependencyMatrix> {
    (1..=max_steps).prop_flat_map(|s| {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..=1.0f64], s * s).prop_map(move |mut v| {
            for i in 0..s {
                v[i * s + i] = 0.0;
            }
            DependencyMatrix::new(Array2::from_shape_vec((s, s), v).unwrap()).unwrap()
        })
    })
}

fn task(s: usize) -> TaskSpec {
    TaskSpec {
        task_id: "t".into(),
        goal: "g".into(),
        steps: (0..s).map(|i| format!("step {i}")).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn adjusted_rows_are_stochastic(
        deps in deps_strategy(7),
        progress_seed in prop::collection::vec(0.0..=1.0f64, 7),
        epsilon in prop_oneof![Just(0.0), Just(1e-8), 0.0..0.1f64],
        mass in prop_oneof![Just(None), (0.01..0.99f64).prop_map(Some)],
        row_fixup in any::<bool>(),
    ) {
        let s = deps.num_steps();
        let tracker = ProgressTracker::from_values(progress_seed[..s].to_vec()).unwrap();
        let fixup = if row_fixup { FixupRule::Row } else { FixupRule::Column };
        let config = TransitionConfig { fixup, epsilon, none: NoneTransitions::Escape { mass } };
        let base = init_transition(&deps, fixup);
        let m = adjust(&base, &readiness(&deps, &tracker), &stepground::transition::validity(&deps, &tracker), &config);
        prop_assert_eq!(m.num_states(), s + 1);
        for row in m.to_rows() {
            prop_assert!(row.iter().all(|x| x.is_finite() && *x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn readiness_grows_with_prerequisite_progress(
        deps in deps_strategy(6),
        progress in prop::collection::vec(0.0..=1.0f64, 6),
        which in 0usize..6,
        bump in 0.0..=1.0f64,
    ) {
        let s = deps.num_steps();
        let k = which % s;
        let before = ProgressTracker::from_values(progress[..s].to_vec()).unwrap();
        let mut raised = progress[..s].to_vec();
        raised[k] = (raised[k] + bump).min(1.0);
        let after = ProgressTracker::from_values(raised).unwrap();
        let (r0, r1) = (readiness(&deps, &before), readiness(&deps, &after));
        let (v0, v1) = (
            stepground::transition::validity(&deps, &before),
            stepground::transition::validity(&deps, &after),
        );
        for i in 0..s {
            prop_assert!(r1[i] >= r0[i] - 1e-12);
            prop_assert!(v1[i] <= v0[i] + 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r1[i]));
            prop_assert!((-1e-12..=1.0).contains(&v1[i]));
        }
    }

    #[test]
    fn beliefs_stay_on_the_simplex(
        deps in deps_strategy(5),
        stream in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 6), prop::collection::vec(0.0..=1.0f64, 5)), 1..25),
    ) {
        let s = deps.num_steps();
        let mut filter = StepFilter::new(&task(s), deps, FilterConfig::default()).unwrap();
        let mut prev_progress = vec![0.0; s];
        for (weights, progress) in &stream {
            let mut w = weights[..=s].to_vec();
            w[0] += 1e-3;
            let scores = ObservationScores::from_weights(&w).unwrap();
            let input = SegmentInput { scores: &scores, progress: &progress[..s], next_step: None };
            let belief = filter.step(input).unwrap();
            prop_assert!(belief.as_slice().iter().all(|p| *p >= 0.0));
            prop_assert!((belief.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // The tracker is a running maximum of observed progress.
            for (i, p) in filter.tracker().values().iter().enumerate() {
                prop_assert!(*p >= prev_progress[i]);
                prev_progress[i] = *p;
            }
        }
        prop_assert_eq!(filter.alignment().num_segments(), stream.len());
    }

    #[test]
    fn ap_ignores_detection_order(
        dets in prop::collection::vec((0usize..2, 0.0..40.0f64, 1.0..8.0f64, 0.0..1.0f64), 0..15),
        gts in prop::collection::vec((0usize..2, 0.0..40.0f64, 1.0..8.0f64), 1..8),
        seed in any::<u64>(),
        tau in 0.1..0.9f64,
    ) {
        let detections: Vec<ScoredDetection> = dets
            .iter()
            .map(|&(step, s, len, c)| ScoredDetection { video_id: "v".into(), step, start_s: s, end_s: s + len, confidence: c })
            .collect();
        let ground_truth: Vec<GroundTruthInstance> = gts
            .iter()
            .map(|&(step, s, len)| GroundTruthInstance { video_id: "v".into(), step, start_s: s, end_s: s + len })
            .collect();
        let mut shuffled = detections.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = ActivityDetections { activity: "a".into(), detections, ground_truth: ground_truth.clone() };
        let b = ActivityDetections { activity: "a".into(), detections: shuffled, ground_truth };
        for interp in [ApInterpolation::AllPoint, ApInterpolation::Point101] {
            let x = average_precision(&a, tau, interp).unwrap();
            let y = average_precision(&b, tau, interp).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn recall_invariant_under_uniform_mixing(
        rows in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 4), 4..20),
        lambda in 0.05..1.0f64,
        annotated in prop::collection::vec((0usize..3, 0usize..20, 1usize..5), 1..4),
    ) {
        // `λ·b + (1-λ)/n` is strictly increasing in every entry and keeps
        // rows on the simplex, so column argmaxes cannot move.
        let t = rows.len();
        let timeline = SegmentTimeline::new("v", 2.0, t).unwrap();
        let plain: Vec<Belief> = rows.iter().map(|r| Belief::from_weights(r).unwrap()).collect();
        let mixed: Vec<Belief> = plain
            .iter()
            .map(|b| {
                let n = b.len() as f64;
                Belief::new(b.as_slice().iter().map(|p| lambda * p + (1.0 - lambda) / n).collect()).unwrap()
            })
            .collect();
        let mut segments: Vec<StepInterval> = annotated
            .iter()
            .map(|&(step, start, len)| {
                let start = (start % t) as f64 * 2.0;
                StepInterval { step, start_s: start, end_s: (start + 2.0 * len as f64).min(2.0 * t as f64) }
            })
            .collect();
        segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let gt = GroundTruthAnnotation { video_id: "v".into(), task_id: "t".into(), length_s: 2.0 * t as f64, segments };
        let a = recall_at_1(&AlignmentMatrix::from_rows(plain).unwrap(), &gt, &timeline).unwrap();
        let b = recall_at_1(&AlignmentMatrix::from_rows(mixed).unwrap(), &gt, &timeline).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn suppression_is_idempotent(
        raw in prop::collection::vec((0usize..100, 1.0..30.0f64, 0.0..1.0f64), 0..30),
        overlap in 0.0..1.0f64,
        iou in any::<bool>(),
    ) {
        let blobs: Vec<Blob> = raw.iter().map(|&(center, sigma, response)| Blob { center, sigma, response }).collect();
        let measure = if iou { OverlapMeasure::Iou } else { OverlapMeasure::Smaller };
        let once = suppress(blobs, overlap, measure);
        let twice = suppress(once.clone(), overlap, measure);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn higher_threshold_keeps_a_subset(
        signal in prop::collection::vec(0.0..=1.0f64, 3..80),
        low in 1e-4..0.1f64,
        extra in 0.0..0.3f64,
    ) {
        let config = |threshold| LocalizationConfig { threshold, nms_overlap: 1.0, ..Default::default() };
        let loose = detect_blobs(&signal, &config(low));
        let strict = detect_blobs(&signal, &config(low + extra));
        prop_assert!(strict.len() <= loose.len());
        prop_assert!(strict.iter().all(|b| loose.contains(b)));
        prop_assert!(strict.iter().all(|b| b.response > low + extra));
    }
}
