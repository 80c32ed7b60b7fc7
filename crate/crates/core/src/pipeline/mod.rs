//! The `prepare`, `predict` and `evaluate` workflows and their shared
//! configuration.

mod evaluate;
mod predict;
mod prepare;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{BalanceSpec, SplitSpec};
use crate::inference::BackendSpec;
use crate::metrics::BinaryOptions;
use crate::overlay::ColorMap;
use crate::preprocess::{ChannelStats, Preprocessor, MODEL_INPUT_SIDE};
use crate::wsi_io::DEFAULT_TILE_SIZE;

pub use evaluate::{evaluate, EvaluateSummary};
pub use predict::{predict, predict_with, PredictSummary, StageTimes};
pub use prepare::{prepare, PrepareSummary, ANNOTATION_EXTENSIONS, SLIDE_EXTENSIONS};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Wsi { context: String, source: crate::wsi_io::WsiError },
    #[error("{context}: {source}")]
    Annotation { context: String, source: crate::annotation::AnnotationError },
    #[error("{context}: {source}")]
    Dataset { context: String, source: crate::dataset::DatasetError },
    #[error("{context}: {source}")]
    Preprocess { context: String, source: crate::preprocess::PreprocessError },
    #[error("{context}: {source}")]
    Inference { context: String, source: crate::inference::InferenceError },
    #[error("{context}: {source}")]
    Overlay { context: String, source: crate::overlay::OverlayError },
    #[error("{context}: {source}")]
    Metrics { context: String, source: crate::metrics::MetricsError },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("slide {0} has no annotation document")]
    UnmatchedSlide(String),
    #[error("no slides found in {0}")]
    NoSlides(PathBuf),
    #[error("no prediction rows join the truth manifest ({predictions} predictions, {truths} truth rows)")]
    EmptyJoin { predictions: usize, truths: usize },
    #[error("prediction worker panicked")]
    WorkerPanic,
}

pub(crate) trait Context<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T, PipelineError>;
}

macro_rules! context_impl {
    ($err:ty, $variant:ident) => {
        impl<T> Context<T> for Result<T, $err> {
            fn context(self, ctx: impl FnOnce() -> String) -> Result<T, PipelineError> {
                self.map_err(|source| PipelineError::$variant { context: ctx(), source })
            }
        }
    };
}

context_impl!(crate::wsi_io::WsiError, Wsi);
context_impl!(crate::annotation::AnnotationError, Annotation);
context_impl!(crate::dataset::DatasetError, Dataset);
context_impl!(crate::preprocess::PreprocessError, Preprocess);
context_impl!(crate::inference::InferenceError, Inference);
context_impl!(crate::overlay::OverlayError, Overlay);
context_impl!(crate::metrics::MetricsError, Metrics);
context_impl!(std::io::Error, Io);

/// Everything the three workflows need. Every field has a default, so a
/// config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tile_size_px: u32,
    pub input_side: u32,
    /// 0 = one per available core.
    pub workers: usize,
    /// Decoded tiles allowed in flight per worker during `predict`.
    pub queue_depth: usize,
    pub backend: Option<BackendSpec>,
    pub overlay: ColorMap,
    pub split: SplitSpec,
    pub balance: BalanceSpec,
    pub balance_enabled: bool,
    /// JSON `ChannelStats` in lαβ space; Reinhard normalization is skipped
    /// when unset.
    pub stain_target: Option<PathBuf>,
    pub zscore: ChannelStats,
    pub evaluate: BinaryOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size_px: DEFAULT_TILE_SIZE,
            input_side: MODEL_INPUT_SIDE,
            workers: 0,
            queue_depth: 32,
            backend: None,
            overlay: ColorMap::default(),
            split: SplitSpec::default(),
            balance: BalanceSpec::default(),
            balance_enabled: true,
            stain_target: None,
            zscore: ChannelStats::imagenet(),
            evaluate: BinaryOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.stain_target.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.tile_size_px == 0 || !self.tile_size_px.is_multiple_of(16) {
            return bad(format!("tile_size_px {} must be a positive multiple of 16", self.tile_size_px));
        }
        if self.input_side == 0 {
            return bad("input_side must be at least 1".into());
        }
        if self.queue_depth == 0 {
            return bad("queue_depth must be at least 1".into());
        }
        self.split.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.balance_enabled {
            self.balance.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.overlay.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(b) = &self.backend {
            b.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn preprocessor(&self) -> Result<Preprocessor, PipelineError> {
        let reinhard_target = match &self.stain_target {
            Some(p) => Some(ChannelStats::load(p).context(|| "loading stain target".into())?),
            None => None,
        };
        let pre = Preprocessor { side: self.input_side, reinhard_target, zscore: self.zscore.clone() };
        pre.validate().context(|| "preprocessing config".into())?;
        Ok(pre)
    }
}

/// Path with `.partial` appended, used while an output is being written.
pub(crate) fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}
