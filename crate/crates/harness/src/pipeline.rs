use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stepground::dependency::{
    build_dependency_chain_oracle, load_dependency_file, load_or_build_dependency, DependencyMatrix,
};
use stepground::filter::{SegmentInput, StepFilter, StepPrior};
use stepground::io::{
    alignment_jsonl, load_annotation, load_task, read_json, write_atomic, write_json_atomic,
};
use stepground::localization::{localize, DetectedSegment};
use stepground::metrics::{recall_count, ActivityDetections, EvalReport, VideoMetrics};
use stepground::model::{
    timeline_from_duration, AlignmentMatrix, Belief, GroundTruthAnnotation, SegmentTimeline,
    TaskSpec,
};
use stepground::observation::remote::RemoteProvider;
use stepground::observation::replay::{CachingProvider, ReplayProvider};
use stepground::observation::synthetic::SyntheticOracleProvider;
use stepground::observation::{MediaRef, ObservationProvider, SegmentRequest};

use crate::config::{DepsSource, ProviderKind, RunConfig};
use crate::HarnessError;

/// One line of a benchmark manifest. Relative paths resolve against the
/// dataset root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Defaults to the annotation's video id.
    #[serde(default)]
    pub video_id: Option<String>,
    pub task: PathBuf,
    #[serde(default)]
    pub annotation: Option<PathBuf>,
    #[serde(default)]
    pub replay: Option<PathBuf>,
    #[serde(default)]
    pub media: Option<String>,
    #[serde(default)]
    pub deps: Option<PathBuf>,
    /// Video length, needed when there is no annotation.
    #[serde(default)]
    pub length_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestEntry>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest, HarnessError> {
    read_json(path).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Everything needed to stream one video through the filter.
#[derive(Debug, Clone)]
pub struct VideoJob {
    pub video_id: String,
    pub task: TaskSpec,
    pub annotation: Option<GroundTruthAnnotation>,
    pub timeline: SegmentTimeline,
    pub media: Option<MediaRef>,
    pub deps: DependencyMatrix,
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct VideoOutcome {
    pub video_id: String,
    pub task_id: String,
    pub alignment: AlignmentMatrix,
    /// Raw step scores, one row per segment.
    pub observed: AlignmentMatrix,
    pub detections: Vec<DetectedSegment>,
    pub metrics: Option<VideoMetrics>,
    pub degenerate_updates: usize,
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Streams every segment of a video, in order, through a fresh filter.
pub fn run_video(
    config: &RunConfig,
    job: &VideoJob,
    provider: &dyn ObservationProvider,
) -> Result<VideoOutcome, HarnessError> {
    let filter_config = config.filter_config();
    let want_next = filter_config.step_prior == StepPrior::NextStep;
    let mut filter = StepFilter::new(&job.task, job.deps.clone(), filter_config)?;
    let mut observed = AlignmentMatrix::new();
    for t in 0..job.timeline.num_segments {
        let req = SegmentRequest {
            task: &job.task,
            video_id: &job.video_id,
            segment: t,
            start_s: job.timeline.start_s(t),
            end_s: job.timeline.end_s(t),
            media: job.media.as_ref(),
        };
        let obs = provider.observe(&req, want_next)?;
        let progress = obs.expected_progress();
        filter.step(SegmentInput {
            scores: &obs.vsg,
            progress: &progress,
            next_step: obs.next.as_ref(),
        })?;
        observed.push(Belief::new(obs.vsg.into_inner()).expect("scores are a simplex"));
    }
    let degenerate_updates = filter.degenerate_updates();
    if degenerate_updates > 0 {
        warn!(
            "{}: {degenerate_updates} segments had no overlap between prior and scores",
            job.video_id
        );
    }
    let alignment = filter.into_alignment();
    let detections = config
        .localization_config()
        .map(|lc| localize(&alignment, &job.timeline, &lc))
        .unwrap_or_default();
    let metrics = match &job.annotation {
        Some(gt) if !gt.segments.is_empty() => {
            let recall = recall_count(&alignment, gt, &job.timeline)?;
            let baseline = recall_count(&observed, gt, &job.timeline)?;
            Some(VideoMetrics {
                video_id: job.video_id.clone(),
                task_id: job.task.task_id.clone(),
                recall,
                recall_at_1: recall.recall(),
                baseline_recall_at_1: Some(baseline.recall()),
                detections: detections.len(),
            })
        }
        _ => None,
    };
    Ok(VideoOutcome {
        video_id: job.video_id.clone(),
        task_id: job.task.task_id.clone(),
        alignment,
        observed,
        detections,
        metrics,
        degenerate_updates,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads tasks, annotations, timelines and dependencies for every entry.
/// Fails before any segment is processed if anything is missing.
pub fn prepare_jobs(
    config: &RunConfig,
    manifest: &Manifest,
    base: &Path,
) -> Result<Vec<VideoJob>, HarnessError> {
    config.validate().map_err(HarnessError::Config)?;
    let mut tasks: HashMap<PathBuf, TaskSpec> = HashMap::new();
    let mut remote_deps: HashMap<String, DependencyMatrix> = HashMap::new();
    let mut jobs = Vec::with_capacity(manifest.videos.len());
    let mut seen = BTreeMap::new();
    for (k, entry) in manifest.videos.iter().enumerate() {
        let task_path = resolve(base, &entry.task);
        let task = match tasks.get(&task_path) {
            Some(t) => t.clone(),
            None => {
                let t = load_task(&task_path).map_err(|e| config_err(e.to_string()))?;
                tasks.insert(task_path.clone(), t.clone());
                t
            }
        };
        let annotation = entry
            .annotation
            .as_ref()
            .map(|p| load_annotation(&resolve(base, p), task.num_steps()))
            .transpose()
            .map_err(|e| config_err(e.to_string()))?;
        let video_id = entry
            .video_id
            .clone()
            .or_else(|| annotation.as_ref().map(|a| a.video_id.clone()))
            .ok_or_else(|| config_err(format!("manifest entry {k} has no video id")))?;
        if let Some(prev) = seen.insert(video_id.clone(), k) {
            return Err(config_err(format!(
                "video `{video_id}` appears in manifest entries {prev} and {k}"
            )));
        }
        let replay = entry.replay.as_ref().map(|p| resolve(base, p));

        let length_s = entry.length_s.or(annotation.as_ref().map(|a| a.length_s));
        let timeline = match length_s {
            Some(len) => {
                timeline_from_duration(&video_id, len, config.segment_duration, config.rounding())
                    .map_err(|e| config_err(format!("{video_id}: {e}")))?
            }
            None => {
                let path = replay
                    .clone()
                    .unwrap_or_else(|| config.cache_dir().join(format!("{video_id}.jsonl")));
                let records = stepground::observation::replay::read_replay_file(&path)
                    .map_err(|e| config_err(e.to_string()))?;
                SegmentTimeline::new(&video_id, config.segment_duration, records.len())
                    .map_err(|e| config_err(format!("{video_id}: {e}")))?
            }
        };

        let deps = match config.deps_source {
            DepsSource::None => DependencyMatrix::zeros(task.num_steps()),
            DepsSource::File => {
                let path = entry.deps.as_ref().ok_or_else(|| {
                    config_err(format!(
                        "`{video_id}` has no dependency file in the manifest"
                    ))
                })?;
                load_dependency_file(&resolve(base, path), &task)
                    .map_err(|e| config_err(e.to_string()))?
            }
            DepsSource::OracleChain => {
                let ann = annotation.as_ref().ok_or_else(|| {
                    config_err(format!(
                        "oracle-chain dependencies need an annotation for `{video_id}`"
                    ))
                })?;
                build_dependency_chain_oracle(ann, task.num_steps())
                    .map_err(|e| config_err(e.to_string()))?
            }
            DepsSource::RemoteLlm => match remote_deps.get(&task.task_id) {
                Some(d) => d.clone(),
                None => {
                    let path = match &entry.deps {
                        Some(p) => resolve(base, p),
                        None => config
                            .cache_dir()
                            .join("deps")
                            .join(format!("{}.json", task.task_id)),
                    };
                    let scorer = RemoteProvider::new(config.endpoint.llm_endpoint())
                        .map_err(|e| config_err(e.to_string()))?;
                    let d = load_or_build_dependency(
                        &path,
                        &task,
                        &scorer,
                        config.endpoint.max_concurrent,
                    )
                    .map_err(|e| config_err(e.to_string()))?;
                    remote_deps.insert(task.task_id.clone(), d.clone());
                    d
                }
            },
        };

        jobs.push(VideoJob {
            video_id,
            task,
            annotation,
            timeline,
            media: entry.media.clone().map(|uri| MediaRef { uri }),
            deps,
            replay,
        });
    }
    Ok(jobs)
}

/// The observation source selected by the configuration. Synthetic and
/// remote responses are cached per video under the cache directory.
pub fn build_provider(
    config: &RunConfig,
    jobs: &[VideoJob],
) -> Result<Box<dyn ObservationProvider>, HarnessError> {
    Ok(match config.provider {
        ProviderKind::Replay => {
            let mut provider = ReplayProvider::new();
            for job in jobs {
                let path = job
                    .replay
                    .clone()
                    .unwrap_or_else(|| config.cache_dir().join(format!("{}.jsonl", job.video_id)));
                provider
                    .add_video(&job.video_id, &path)
                    .map_err(|e| config_err(e.to_string()))?;
            }
            Box::new(provider)
        }
        ProviderKind::Synthetic => {
            let mut provider = SyntheticOracleProvider::new(config.synthetic_noise, config.seed)
                .with_smoothing(config.synthetic_smoothing);
            for job in jobs {
                let ann = job.annotation.clone().ok_or_else(|| {
                    config_err(format!(
                        "the synthetic provider needs an annotation for `{}`",
                        job.video_id
                    ))
                })?;
                provider.add_video(ann, job.timeline.clone());
            }
            Box::new(CachingProvider::new(provider, config.cache_dir()))
        }
        ProviderKind::Remote => {
            let provider = RemoteProvider::new(config.endpoint.endpoint(config.vsg_prompt()))
                .map_err(|e| config_err(e.to_string()))?;
            Box::new(CachingProvider::new(provider, config.cache_dir()))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedVideo {
    pub video_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(flatten)]
    pub eval: EvalReport,
    pub failed: Vec<FailedVideo>,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub videos: Vec<VideoOutcome>,
    pub report: BenchReport,
}

/// Runs all jobs on a bounded pool; results keep manifest order.
pub fn run_jobs(
    config: &RunConfig,
    jobs: &[VideoJob],
    provider: &dyn ObservationProvider,
) -> Result<BenchOutcome, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count())
        .build()
        .map_err(|e| config_err(e.to_string()))?;
    let results: Vec<Result<VideoOutcome, HarnessError>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_video(config, job, provider))
            .collect()
    });

    let mut videos = Vec::new();
    let mut failed = Vec::new();
    let mut activities: BTreeMap<String, ActivityDetections> = BTreeMap::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(outcome) => {
                if let Some(gt) = &job.annotation {
                    activities
                        .entry(outcome.task_id.clone())
                        .or_insert_with(|| ActivityDetections {
                            activity: outcome.task_id.clone(),
                            ..Default::default()
                        })
                        .add_video(gt, &outcome.detections);
                }
                videos.push(outcome);
            }
            Err(e) => {
                warn!("{} failed: {e}", job.video_id);
                failed.push(FailedVideo {
                    video_id: job.video_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let activities: Vec<ActivityDetections> = activities.into_values().collect();
    let eval = EvalReport::build(
        videos.iter().filter_map(|v| v.metrics.clone()).collect(),
        &activities,
        config.metrics_config(),
    );
    Ok(BenchOutcome {
        videos,
        report: BenchReport { eval, failed },
    })
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("outputs serialize");
    bytes.push(b'\n');
    bytes
}

/// Writes per-video outputs and the top-level reports.
pub fn write_outputs(dir: &Path, outcome: &BenchOutcome) -> Result<(), HarnessError> {
    for video in &outcome.videos {
        let vdir = dir.join(&video.video_id);
        write_atomic(
            &vdir.join("alignment.jsonl"),
            &alignment_jsonl(&video.alignment),
        )?;
        write_atomic(
            &vdir.join("detections.json"),
            &json_bytes(&video.detections),
        )?;
        if let Some(m) = &video.metrics {
            write_json_atomic(&vdir.join("metrics.json"), m)?;
        }
    }
    write_json_atomic(&dir.join("report.json"), &outcome.report)?;
    let csv = outcome
        .report
        .eval
        .to_csv()
        .map_err(|e| config_err(e.to_string()))?;
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    write_atomic(
        &dir.join("report.txt"),
        outcome.report.eval.to_table().as_bytes(),
    )?;
    Ok(())
}

/// Loads the manifest, runs every video and writes all outputs. A batch
/// with failed videos still writes its report and returns
/// [`HarnessError::PartialFailure`].
pub fn run_benchmark(
    config: &RunConfig,
    manifest_path: &Path,
) -> Result<BenchOutcome, HarnessError> {
    let manifest = load_manifest(manifest_path)?;
    let base = config.dataset_root.clone().unwrap_or_else(|| {
        manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    run_manifest(config, &manifest, &base)
}

pub fn run_manifest(
    config: &RunConfig,
    manifest: &Manifest,
    base: &Path,
) -> Result<BenchOutcome, HarnessError> {
    let jobs = prepare_jobs(config, manifest, base)?;
    let provider = build_provider(config, &jobs)?;
    info!(
        "running {} videos on {} workers",
        jobs.len(),
        config.worker_count()
    );
    let outcome = run_jobs(config, &jobs, provider.as_ref())?;
    write_outputs(&config.output_dir, &outcome)?;
    let failed = outcome.report.failed.len();
    if failed > 0 {
        return Err(HarnessError::PartialFailure {
            failed,
            total: jobs.len(),
            outcome: Box::new(outcome),
        });
    }
    Ok(outcome)
}
