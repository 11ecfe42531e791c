use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::error;

use stepground::dependency::{
    build_dependency_remote, load_dependency_file, save_dependency_file, threshold_matrix,
};
use stepground::io::{load_task, write_json_atomic};
use stepground::observation::remote::RemoteProvider;
use stepground_harness::config::{EndpointArgs, ProviderKind, RunConfig};
use stepground_harness::pipeline::{run_benchmark, run_manifest, Manifest, ManifestEntry};
use stepground_harness::violations::{run_violation_analysis, violation_table};
use stepground_harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "stepground",
    version,
    about = "Online step grounding for procedural videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect dependency matrices.
    #[command(subcommand)]
    Deps(DepsCommand),
    /// Ground a single video.
    Run {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        video_id: Option<String>,
        #[arg(long)]
        annotation: Option<PathBuf>,
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        media: Option<String>,
        #[arg(long)]
        deps: Option<PathBuf>,
        #[arg(long)]
        length: Option<f64>,
        #[command(flatten)]
        config: RunConfig,
    },
    /// Ground every video of a manifest and write reports.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        config: RunConfig,
    },
    /// Re-run a manifest from cached provider responses only.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        config: RunConfig,
    },
    /// Count declared dependencies contradicted by annotated step order.
    Violations {
        #[arg(long)]
        manifest: PathBuf,
        /// Thresholds to sweep; defaults to 0.0, 0.1, ..., 1.0.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[command(flatten)]
        config: RunConfig,
    },
}

#[derive(Subcommand)]
enum DepsCommand {
    /// Query a language model for every ordered pair of steps.
    Build {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Validate a dependency file against its task and summarize it.
    Check {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        deps: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn manifest_base(manifest: &Path, config: &RunConfig) -> PathBuf {
    config
        .dataset_root
        .clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Deps(DepsCommand::Build {
            task,
            out,
            endpoint,
        }) => {
            let task = load_task(&task)?;
            let scorer = RemoteProvider::new(endpoint.llm_endpoint())?;
            let deps = build_dependency_remote(&task, &scorer, endpoint.max_concurrent)?;
            save_dependency_file(&out, &task.task_id, &deps)?;
            println!("wrote {}", out.display());
        }
        Command::Deps(DepsCommand::Check {
            task,
            deps,
            threshold,
        }) => {
            let task = load_task(&task)?;
            let matrix = load_dependency_file(&deps, &task)?;
            let hard = threshold_matrix(&matrix, threshold);
            println!(
                "{} steps, {} dependencies at threshold {threshold}{}",
                task.num_steps(),
                hard.pairs().count(),
                if hard.has_cycle() { ", cyclic" } else { "" }
            );
        }
        Command::Run {
            task,
            video_id,
            annotation,
            replay,
            media,
            deps,
            length,
            config,
        } => {
            let manifest = Manifest {
                videos: vec![ManifestEntry {
                    video_id,
                    task,
                    annotation,
                    replay,
                    media,
                    deps,
                    length_s: length,
                }],
            };
            let outcome = run_manifest(&config, &manifest, Path::new(""))?;
            print!("{}", outcome.report.eval.to_table());
        }
        Command::Bench { manifest, config } => {
            let outcome = run_benchmark(&config, &manifest)?;
            print!("{}", outcome.report.eval.to_table());
        }
        Command::Replay {
            manifest,
            mut config,
        } => {
            config.provider = ProviderKind::Replay;
            let outcome = run_benchmark(&config, &manifest)?;
            print!("{}", outcome.report.eval.to_table());
        }
        Command::Violations {
            manifest,
            thresholds,
            config,
        } => {
            let base = manifest_base(&manifest, &config);
            let m = stepground_harness::pipeline::load_manifest(&manifest)?;
            let stats = run_violation_analysis(&config, &m, &base, thresholds.as_deref())?;
            write_json_atomic(&config.output_dir.join("violations.json"), &stats)?;
            print!("{}", violation_table(&stats));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors count as configuration errors; 2 is reserved for
    // partial failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match run(cli).context("stepground failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .downcast_ref::<HarnessError>()
                .map_or(1, HarnessError::exit_code);
            if let Some(HarnessError::PartialFailure { outcome, .. }) = e.downcast_ref() {
                for f in &outcome.report.failed {
                    error!("{}: {}", f.video_id, f.error);
                }
                print!("{}", outcome.report.eval.to_table());
            }
            error!("{e:#}");
            ExitCode::from(code as u8)
        }
    }
}
