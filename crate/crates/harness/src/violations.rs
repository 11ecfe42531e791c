use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use stepground::dependency::{
    standard_thresholds, sweep_violations, DependencyMatrix, SoftTaskAnnotations, ViolationStats,
};
use stepground::model::GroundTruthAnnotation;

use crate::config::{DepsSource, RunConfig};
use crate::pipeline::{prepare_jobs, Manifest};
use crate::HarnessError;

/// Sweeps dependency thresholds over every annotated task in the manifest.
///
/// Each task uses the dependency matrix of its first video in manifest
/// order; with oracle-chain dependencies that is the chain of that video.
pub fn run_violation_analysis(
    config: &RunConfig,
    manifest: &Manifest,
    base: &Path,
    thresholds: Option<&[f64]>,
) -> Result<Vec<ViolationStats>, HarnessError> {
    if config.deps_source == DepsSource::None {
        return Err(HarnessError::Config(
            "violation analysis needs a dependency source".into(),
        ));
    }
    let jobs = prepare_jobs(config, manifest, base)?;
    let mut tasks: BTreeMap<String, (DependencyMatrix, Vec<GroundTruthAnnotation>)> =
        BTreeMap::new();
    for job in jobs {
        let Some(ann) = job.annotation else { continue };
        tasks
            .entry(job.task.task_id.clone())
            .or_insert_with(|| (job.deps.clone(), Vec::new()))
            .1
            .push(ann);
    }
    let soft: Vec<SoftTaskAnnotations<'_>> = tasks
        .iter()
        .map(|(task_id, (deps, annotations))| SoftTaskAnnotations {
            task_id,
            deps,
            annotations,
        })
        .collect();
    let defaults = standard_thresholds();
    Ok(sweep_violations(&soft, thresholds.unwrap_or(&defaults))?)
}

/// Two rows, violated dependencies and tasks with a violation, in percent.
pub fn violation_table(stats: &[ViolationStats]) -> String {
    let label_width = 28;
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Threshold");
    for s in stats {
        let _ = write!(out, " {:>5.1}", s.threshold);
    }
    out.push('\n');
    let mut row = |name: &str, f: &dyn Fn(&ViolationStats) -> f64| {
        let _ = write!(out, "{name:<label_width$}");
        for s in stats {
            let _ = write!(out, " {:>5.1}", 100.0 * f(s));
        }
        out.push('\n');
    };
    row("Violated dependencies (%)", &|s| {
        s.violated_dependency_fraction
    });
    row("Tasks with violation (%)", &|s| {
        s.tasks_with_violation_fraction
    });
    out
}
