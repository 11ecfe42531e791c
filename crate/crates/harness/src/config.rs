use std::path::PathBuf;

use clap::{Args, Parser, ValueEnum};

use stepground::filter::{FilterConfig, StepPrior};
use stepground::localization::{LocalizationConfig, OverlapMeasure, ScaleSet, ScaleSpacing};
use stepground::metrics::{ApInterpolation, MetricsConfig, RecallAveraging};
use stepground::model::SegmentRounding;
use stepground::observation::remote::{Dialect, RemoteEndpointConfig, VsgPrompt};
use stepground::transition::{FixupRule, NoneTransitions, TransitionConfig, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Remote,
    Replay,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepsSource {
    RemoteLlm,
    OracleChain,
    File,
    /// No dependencies at all.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rounding {
    Floor,
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Uniform,
    NextStep,
    Propagated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VsgPromptArg {
    MultiChoice,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoneMode {
    Escape,
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixupArg {
    Column,
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpacingArg {
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverlapArg {
    Smaller,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    PerVideo,
    StepPooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpolationArg {
    AllPoint,
    Point101,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DialectArg {
    Chat,
    Completions,
}

/// Remote endpoint settings shared by observation scoring and dependency
/// building.
#[derive(Debug, Clone, Args)]
pub struct EndpointArgs {
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    pub endpoint_url: String,
    #[arg(long, default_value = "")]
    pub endpoint_model: String,
    /// Model used for prerequisite queries; defaults to the endpoint model.
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long, value_enum, default_value = "chat")]
    pub dialect: DialectArg,
    #[arg(long, default_value_t = 4)]
    pub max_concurrent: usize,
    #[arg(long, default_value_t = 60.0)]
    pub request_timeout: f64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 8)]
    pub frames_per_segment: u32,
}

impl EndpointArgs {
    pub fn endpoint(&self, vsg_prompt: VsgPrompt) -> RemoteEndpointConfig {
        RemoteEndpointConfig {
            base_url: self.endpoint_url.clone(),
            model: self.endpoint_model.clone(),
            api_key_env: self.api_key_env.clone(),
            max_concurrent: self.max_concurrent,
            timeout_s: self.request_timeout,
            retries: self.retries,
            frames_per_segment: self.frames_per_segment,
            dialect: match self.dialect {
                DialectArg::Chat => Dialect::Chat,
                DialectArg::Completions => Dialect::Completions,
            },
            vsg_prompt,
            ..RemoteEndpointConfig::default()
        }
    }

    pub fn llm_endpoint(&self) -> RemoteEndpointConfig {
        let mut cfg = self.endpoint(VsgPrompt::MultiChoice);
        if let Some(model) = &self.llm_model {
            cfg.model = model.clone();
        }
        cfg
    }
}

/// Every knob of a run. Field names double as kebab-case CLI flags.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Base directory for relative paths in the manifest; defaults to the
    /// manifest's own directory.
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "replay")]
    pub provider: ProviderKind,
    #[arg(long, value_enum, default_value = "file")]
    pub deps_source: DepsSource,
    #[arg(long, default_value_t = 2.0)]
    pub segment_duration: f64,
    #[arg(long, value_enum, default_value = "ceil")]
    pub segment_rounding: Rounding,
    #[arg(long, value_enum, default_value = "uniform")]
    pub step_prior: PriorArg,
    #[arg(long, value_enum, default_value = "multi-choice")]
    pub vsg_prompt: VsgPromptArg,
    /// Floor added to every gated transition weight.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value = "escape")]
    pub none_mode: NoneMode,
    /// Mass every step sends to "none"; defaults to 1/(S+1).
    #[arg(long)]
    pub none_mass: Option<f64>,
    #[arg(long, value_enum, default_value = "column")]
    pub fixup: FixupArg,
    #[arg(long)]
    pub no_localization: bool,
    #[arg(long, value_enum, default_value = "log")]
    pub scale_spacing: SpacingArg,
    #[arg(long, default_value_t = 1e-3)]
    pub blob_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_overlap: f64,
    #[arg(long, value_enum, default_value = "smaller")]
    pub nms_measure: OverlapArg,
    /// Drop blob maxima whose gradient reaches this fraction of their
    /// response; `inf` disables the test.
    #[arg(long, default_value_t = 0.8)]
    pub edge_ratio: f64,
    #[arg(long, value_enum, default_value = "per-video")]
    pub recall_averaging: AveragingArg,
    #[arg(long, value_enum, default_value = "all-point")]
    pub ap_interpolation: InterpolationArg,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    /// Where provider responses are cached; defaults to `<output-dir>/cache`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub synthetic_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub synthetic_smoothing: f64,
    /// Videos processed in parallel; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
}

#[derive(Parser)]
struct Defaults {
    #[command(flatten)]
    config: RunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Defaults::parse_from(["stepground"]).config
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("--{name} must be positive, got {v}"))
            }
        };
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("--{name} must lie in [0, 1], got {v}"))
            }
        };
        positive("segment-duration", self.segment_duration)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(format!(
                "--epsilon must be non-negative, got {}",
                self.epsilon
            ));
        }
        if let Some(m) = self.none_mass {
            unit("none-mass", m)?;
        }
        unit("synthetic-noise", self.synthetic_noise)?;
        unit("synthetic-smoothing", self.synthetic_smoothing)?;
        unit("nms-overlap", self.nms_overlap)?;
        if self.edge_ratio.is_nan() || self.edge_ratio <= 0.0 {
            return Err("--edge-ratio must be positive".into());
        }
        if self.jobs == Some(0) {
            return Err("--jobs must be at least 1".into());
        }
        if self.provider == ProviderKind::Remote || self.deps_source == DepsSource::RemoteLlm {
            self.endpoint
                .endpoint(self.vsg_prompt())
                .validate()
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn rounding(&self) -> SegmentRounding {
        match self.segment_rounding {
            Rounding::Floor => SegmentRounding::Floor,
            Rounding::Ceil => SegmentRounding::Ceil,
        }
    }

    pub fn vsg_prompt(&self) -> VsgPrompt {
        match self.vsg_prompt {
            VsgPromptArg::MultiChoice => VsgPrompt::MultiChoice,
            VsgPromptArg::Binary => VsgPrompt::Binary,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            transition: TransitionConfig {
                fixup: match self.fixup {
                    FixupArg::Column => FixupRule::Column,
                    FixupArg::Row => FixupRule::Row,
                },
                epsilon: self.epsilon,
                none: match self.none_mode {
                    NoneMode::Escape => NoneTransitions::Escape {
                        mass: self.none_mass,
                    },
                    NoneMode::Unconstrained => NoneTransitions::Unconstrained,
                },
            },
            step_prior: match self.step_prior {
                PriorArg::Uniform => StepPrior::Uniform,
                PriorArg::NextStep => StepPrior::NextStep,
                PriorArg::Propagated => StepPrior::Propagated,
            },
        }
    }

    pub fn localization_config(&self) -> Option<LocalizationConfig> {
        if self.no_localization {
            return None;
        }
        let spacing = match self.scale_spacing {
            SpacingArg::Log => ScaleSpacing::Log,
            SpacingArg::Linear => ScaleSpacing::Linear,
        };
        Some(LocalizationConfig {
            scales: ScaleSet::new(
                spacing,
                ScaleSet::DEFAULT_COUNT,
                ScaleSet::DEFAULT_MIN,
                ScaleSet::DEFAULT_MAX,
            ),
            threshold: self.blob_threshold,
            nms_overlap: self.nms_overlap,
            overlap_measure: match self.nms_measure {
                OverlapArg::Smaller => OverlapMeasure::Smaller,
                OverlapArg::Iou => OverlapMeasure::Iou,
            },
            edge_ratio: self.edge_ratio,
        })
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            averaging: match self.recall_averaging {
                AveragingArg::PerVideo => RecallAveraging::PerVideo,
                AveragingArg::StepPooled => RecallAveraging::StepPooled,
            },
            interpolation: match self.ap_interpolation {
                InterpolationArg::AllPoint => ApInterpolation::AllPoint,
                InterpolationArg::Point101 => ApInterpolation::Point101,
            },
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// Worker count: available cores, capped by the endpoint's request bound
    /// for remote runs.
    pub fn worker_count(&self) -> usize {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut jobs = self.jobs.unwrap_or(cores);
        if self.provider == ProviderKind::Remote {
            jobs = jobs.min(self.endpoint.max_concurrent.max(1));
        }
        jobs.max(1)
    }
}
