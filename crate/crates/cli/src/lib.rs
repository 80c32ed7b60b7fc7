//! Argument parsing and config resolution for the `tilegrade` binary.
//!
//! Precedence is command-line flag, then config file, then built-in default.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tilegrade_core::annotation::GleasonClass;
use tilegrade_core::dataset::Split;
use tilegrade_core::inference::{BackendKind, BackendSpec, OutputKind, RemoteConfig};
use tilegrade_core::metrics::{ArtefactMode, FineScope};
use tilegrade_core::pipeline::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "tilegrade", version, about = "Tile-wise Gleason grading of whole-slide images")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile annotated slides into a labeled, split PNG dataset with a manifest.
    Prepare(PrepareArgs),
    /// Classify every tile of a slide and write a heatmap overlay and CSV.
    Predict(PredictArgs),
    /// Score predictions against a truth manifest.
    Evaluate(EvaluateArgs),
    /// Print the effective configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub tile_size: Option<u32>,
}

/// Overrides to preview with `config`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub slides: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train/val/test ratios, as percentages (62,15,23) or fractions.
    #[arg(long)]
    pub ratios: Option<String>,
    /// `CLASS=FRACTION` (e.g. sponge=0.04), or `none`.
    #[arg(long)]
    pub balance: Option<String>,
    /// Keep each slide's tiles within one split.
    #[arg(long)]
    pub group_by_slide: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub slide: PathBuf,
    /// `lookup:FILE`, `model:FILE` or `remote:URL`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Output overlay slide (tiled pyramidal TIFF).
    #[arg(long)]
    pub out: PathBuf,
    /// Output per-tile prediction CSV.
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Reinhard target statistics (JSON).
    #[arg(long)]
    pub stain_target: Option<PathBuf>,
    #[arg(long)]
    pub queue_depth: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BinaryMode {
    ExcludeArtefacts,
    BenignArtefacts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FineMode {
    Malignant,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// JSON report; a text table is written next to it with a .txt extension.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum)]
    pub binary_mode: Option<BinaryMode>,
    #[arg(long, value_enum)]
    pub fine_scope: Option<FineMode>,
}

pub fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split([',', '-', '/'])
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad ratio {p:?}")))
        .collect::<Result<_>>()?;
    let [a, b, c] = parts[..] else {
        bail!("expected three ratios, got {}", parts.len());
    };
    let sum = a + b + c;
    let scale = if (sum - 100.0).abs() < 1e-6 { 100.0 } else { 1.0 };
    let r = [a / scale, b / scale, c / scale];
    let total: f64 = r.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        bail!("ratios {s:?} sum to {sum}, expected 1 or 100");
    }
    Ok(r)
}

fn class_alias(s: &str) -> Option<GleasonClass> {
    match s.trim().to_ascii_lowercase().as_str() {
        "sponge" => Some(GleasonClass::ArtefactSponge),
        "empty" => Some(GleasonClass::ArtefactEmpty),
        "regular" => Some(GleasonClass::Regular),
        "g3" => Some(GleasonClass::Gleason3),
        "g4" => Some(GleasonClass::Gleason4),
        "g5" => Some(GleasonClass::Gleason5),
        other => GleasonClass::from_name(other),
    }
}

/// `Some((class, f))`, or `None` for `none`.
pub fn parse_balance(s: &str) -> Result<Option<(GleasonClass, f64)>> {
    if s.trim().eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let (name, f) = s.split_once('=').with_context(|| format!("expected CLASS=FRACTION, got {s:?}"))?;
    let class = class_alias(name).with_context(|| format!("unknown class {name:?}"))?;
    let f: f64 = f.trim().parse().with_context(|| format!("bad fraction {f:?}"))?;
    Ok(Some((class, f)))
}

pub fn parse_backend(s: &str, previous: Option<&BackendSpec>) -> Result<BackendSpec> {
    let (kind, loc) = s.split_once(':').with_context(|| format!("expected KIND:LOCATOR, got {s:?}"))?;
    let kind = match kind {
        "lookup" => BackendKind::Lookup { path: loc.into() },
        "model" => BackendKind::ModelFile { path: loc.into(), output: OutputKind::Auto },
        "remote" => {
            // Keep retry/model settings from the config file when only the URL changes.
            let mut cfg = match previous.map(|p| &p.kind) {
                Some(BackendKind::Remote(c)) => c.clone(),
                _ => RemoteConfig::new(""),
            };
            cfg.endpoint = loc.into();
            BackendKind::Remote(cfg)
        }
        other => bail!("unknown backend kind {other:?} (expected lookup, model or remote)"),
    };
    Ok(BackendSpec { kind, batch_size: previous.map_or(tilegrade_core::inference::DEFAULT_BATCH_SIZE, |p| p.batch_size) })
}

fn apply_common(cfg: &mut PipelineConfig, c: &CommonArgs) {
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(t) = c.tile_size {
        cfg.tile_size_px = t;
    }
}

/// Config file (if any) with the subcommand's flags applied on top.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match &cli.command {
        Command::Prepare(a) => {
            apply_common(&mut cfg, &a.common);
            if let Some(seed) = a.seed {
                cfg.split.seed = seed;
            }
            if let Some(r) = &a.ratios {
                cfg.split.ratios = parse_ratios(r)?;
            }
            if a.group_by_slide {
                cfg.split.group_by_slide = true;
            }
            if let Some(b) = &a.balance {
                match parse_balance(b)? {
                    None => cfg.balance_enabled = false,
                    Some((class, f)) => {
                        cfg.balance_enabled = true;
                        cfg.balance.class = class;
                        cfg.balance.target_fraction = f;
                        if cfg.balance.applies_to.is_empty() {
                            cfg.balance.applies_to = vec![Split::Train, Split::Val];
                        }
                    }
                }
            }
        }
        Command::Predict(a) => {
            apply_common(&mut cfg, &a.common);
            if let Some(b) = &a.backend {
                cfg.backend = Some(parse_backend(b, cfg.backend.as_ref())?);
            }
            if let Some(n) = a.batch_size {
                match cfg.backend.as_mut() {
                    Some(b) => b.batch_size = n,
                    None => bail!("--batch-size needs a backend"),
                }
            }
            if let Some(v) = a.alpha {
                cfg.overlay.alpha = v;
            }
            if let Some(v) = a.threshold {
                cfg.overlay.threshold = v;
            }
            if let Some(p) = &a.stain_target {
                cfg.stain_target = Some(p.clone());
            }
            if let Some(q) = a.queue_depth {
                cfg.queue_depth = q;
            }
        }
        Command::Evaluate(a) => {
            if let Some(m) = a.binary_mode {
                cfg.evaluate.artefacts = match m {
                    BinaryMode::ExcludeArtefacts => ArtefactMode::Exclude,
                    BinaryMode::BenignArtefacts => ArtefactMode::Benign,
                };
            }
            if let Some(f) = a.fine_scope {
                cfg.evaluate.fine_scope = match f {
                    FineMode::Malignant => FineScope::MalignantTruths,
                    FineMode::All => FineScope::AllTiles,
                };
            }
        }
        Command::Config(a) => {
            apply_common(&mut cfg, &a.common);
            if let Some(seed) = a.seed {
                cfg.split.seed = seed;
            }
            if let Some(v) = a.alpha {
                cfg.overlay.alpha = v;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
