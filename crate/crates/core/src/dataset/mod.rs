//! Coverage → labels, questionable filtering, stratified splitting, class
//! balancing and the tile manifest.

mod manifest;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{CoverageVector, GleasonClass};
use crate::wsi_io::TileCoord;

pub use manifest::{read_manifest, write_manifest, ManifestRow, MANIFEST_FILE, TILE_DIR};

/// Tissue classes need strictly more than half the tile.
pub const TISSUE_THRESHOLD: f64 = 0.5;
/// Artefact classes need strictly more than 90% of the tile.
pub const ARTEFACT_THRESHOLD: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("invalid balance spec: {0}")]
    InvalidBalance(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("manifest {path}: {reason}")]
    BadRow { path: String, reason: String },
    #[error("encoding tile image {path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error(transparent)]
    Tile(#[from] crate::wsi_io::WsiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    None,
}

impl Split {
    pub const ASSIGNABLE: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "train" => Split::Train,
            "val" | "validation" => Split::Val,
            "test" => Split::Test,
            "none" | "" => Split::None,
            _ => return None,
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTile {
    pub slide_id: String,
    pub coord: TileCoord,
    /// `None` means unlabeled: no class reached its coverage threshold.
    pub label: Option<GleasonClass>,
    pub coverage: CoverageVector,
    pub split: Split,
}

impl LabeledTile {
    pub fn new(slide_id: impl Into<String>, coord: TileCoord, coverage: CoverageVector) -> Self {
        let label = assign_label(&coverage);
        Self { slide_id: slide_id.into(), coord, label, coverage, split: Split::None }
    }

    pub fn model_class(&self) -> Option<GleasonClass> {
        self.label.filter(|c| c.model_index().is_some())
    }
}

fn threshold(c: GleasonClass) -> f64 {
    if c.is_artefact() {
        ARTEFACT_THRESHOLD
    } else {
        TISSUE_THRESHOLD
    }
}

/// Assigns a tile label from its coverage. Thresholds are strict; a tile on
/// which two classes qualify (only possible with overlapping ROIs) stays
/// unlabeled.
pub fn assign_label(coverage: &CoverageVector) -> Option<GleasonClass> {
    let mut qualified = GleasonClass::ALL.iter().copied().filter(|&c| coverage.get(c) > threshold(c));
    let first = qualified.next()?;
    if let Some(second) = qualified.next() {
        tracing::warn!(%first, %second, "two classes exceed their coverage threshold; tile left unlabeled");
        return None;
    }
    Some(first)
}

/// Drops questionable and unlabeled tiles, preserving order.
pub fn filter_questionable(tiles: Vec<LabeledTile>) -> Vec<LabeledTile> {
    tiles.into_iter().filter(|t| t.model_class().is_some()).collect()
}

/// Train/val/test ratios and the shuffle seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Keep every slide's tiles in a single split (off by default).
    #[serde(default)]
    pub group_by_slide: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: [0.62, 0.15, 0.23], seed: 42, group_by_slide: false }
    }
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self, DatasetError> {
        let s = Self { ratios, seed, group_by_slide: false };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(DatasetError::InvalidSplit(format!("ratios must be non-negative: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidSplit(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`; remainders
/// are handed out by descending fractional part, ties in split order.
pub fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Assigns a split to every model-class tile; other tiles get `Split::None`.
///
/// Per class: the class's tiles are shuffled with a seeded RNG and cut
/// according to [`apportion`]. Classes are processed in model order from a
/// single RNG stream, so the result depends only on `(tiles, spec)`.
pub fn stratified_split(mut tiles: Vec<LabeledTile>, spec: &SplitSpec) -> Result<Vec<LabeledTile>, DatasetError> {
    spec.validate()?;
    for t in tiles.iter_mut() {
        t.split = Split::None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.group_by_slide {
        split_by_slide(&mut tiles, spec, &mut rng);
        return Ok(tiles);
    }
    for class in GleasonClass::MODEL {
        let mut idx: Vec<usize> =
            tiles.iter().enumerate().filter(|(_, t)| t.model_class() == Some(class)).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let sizes = apportion(idx.len(), &spec.ratios);
        let mut it = idx.into_iter();
        for (split, n) in Split::ASSIGNABLE.into_iter().zip(sizes) {
            for i in it.by_ref().take(n) {
                tiles[i].split = split;
            }
        }
    }
    Ok(tiles)
}

/// Slide-isolating variant: whole slides are assigned greedily to the split
/// with the largest remaining tile deficit.
fn split_by_slide(tiles: &mut [LabeledTile], spec: &SplitSpec, rng: &mut ChaCha8Rng) {
    let mut by_slide: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tiles.iter().enumerate() {
        if t.model_class().is_some() {
            by_slide.entry(t.slide_id.as_str()).or_default().push(i);
        }
    }
    let total: usize = by_slide.values().map(Vec::len).sum();
    let targets: Vec<f64> = spec.ratios.iter().map(|r| r * total as f64).collect();
    let mut groups: Vec<Vec<usize>> = by_slide.into_values().collect();
    groups.shuffle(rng);
    let mut assigned = [0usize; 3];
    let mut plan = Vec::with_capacity(groups.len());
    for g in &groups {
        let best = (0..3)
            .max_by(|&a, &b| {
                let da = targets[a] - assigned[a] as f64;
                let db = targets[b] - assigned[b] as f64;
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .unwrap_or(0);
        assigned[best] += g.len();
        plan.push(best);
    }
    for (g, s) in groups.iter().zip(plan) {
        for &i in g {
            tiles[i].split = Split::ASSIGNABLE[s];
        }
    }
}

/// Target-class down-sampling for selected splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSpec {
    pub class: GleasonClass,
    pub target_fraction: f64,
    pub applies_to: Vec<Split>,
}

impl Default for BalanceSpec {
    fn default() -> Self {
        Self {
            class: GleasonClass::ArtefactSponge,
            target_fraction: 0.04,
            applies_to: vec![Split::Train, Split::Val],
        }
    }
}

impl BalanceSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let f = self.target_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(DatasetError::InvalidBalance(format!("target fraction {f} must lie in (0, 1)")));
        }
        if self.class.model_index().is_none() {
            return Err(DatasetError::InvalidBalance(format!("{} is not a model class", self.class)));
        }
        Ok(())
    }
}

/// Number of target-class tiles to keep next to `n_other` others.
pub fn balance_keep_count(n_other: usize, f: f64) -> usize {
    // Guard against 0.04/0.96·4800 landing a hair under 200.
    (f / (1.0 - f) * n_other as f64 + 1e-9).floor() as usize
}

/// Indices (into `is_target`) of target tiles to drop.
fn balance_drops(is_target: &[bool], f: f64, seed: u64) -> Vec<usize> {
    let n_other = is_target.iter().filter(|t| !**t).count();
    let k = balance_keep_count(n_other, f);
    let mut target: Vec<usize> = is_target.iter().enumerate().filter(|(_, t)| **t).map(|(i, _)| i).collect();
    if target.len() <= k {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    target.shuffle(&mut rng);
    target.split_off(k)
}

/// Down-samples the target class within one split's tiles to at most the
/// target fraction. Never up-samples; non-target tiles are untouched and the
/// input order is preserved.
pub fn balance_class(
    tiles: Vec<LabeledTile>,
    spec: &BalanceSpec,
    seed: u64,
) -> Result<Vec<LabeledTile>, DatasetError> {
    spec.validate()?;
    let is_target: Vec<bool> = tiles.iter().map(|t| t.label == Some(spec.class)).collect();
    let mut keep = vec![true; tiles.len()];
    for i in balance_drops(&is_target, spec.target_fraction, seed) {
        keep[i] = false;
    }
    Ok(tiles.into_iter().zip(keep).filter_map(|(t, k)| k.then_some(t)).collect())
}

/// Applies [`balance_class`] to each split listed in the spec, leaving the
/// other splits intact. Output keeps the input order.
pub fn balance_splits(
    tiles: Vec<LabeledTile>,
    spec: &BalanceSpec,
    seed: u64,
) -> Result<Vec<LabeledTile>, DatasetError> {
    spec.validate()?;
    let mut keep = vec![true; tiles.len()];
    for (n, &split) in spec.applies_to.iter().enumerate() {
        let idx: Vec<usize> = tiles.iter().enumerate().filter(|(_, t)| t.split == split).map(|(i, _)| i).collect();
        let is_target: Vec<bool> = idx.iter().map(|&i| tiles[i].label == Some(spec.class)).collect();
        for j in balance_drops(&is_target, spec.target_fraction, seed.wrapping_add(n as u64 + 1)) {
            keep[idx[j]] = false;
        }
    }
    Ok(tiles.into_iter().zip(keep).filter_map(|(t, k)| k.then_some(t)).collect())
}

/// Tile counts per class and split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitSummary {
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl SplitSummary {
    pub fn from_tiles(tiles: &[LabeledTile]) -> Self {
        let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for t in tiles {
            let class = t.label.map(|c| c.name().to_string()).unwrap_or_else(|| "Unlabeled".into());
            *counts.entry(class).or_default().entry(t.split.as_str().to_string()).or_default() += 1;
        }
        Self { counts }
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts.values().filter_map(|m| m.get(split.as_str())).sum()
    }
}

impl fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>8} {:>8} {:>8}", "class", "train", "val", "test", "total")?;
        for (class, m) in &self.counts {
            let g = |s: Split| m.get(s.as_str()).copied().unwrap_or(0);
            let total: usize = m.values().sum();
            writeln!(f, "{:<16} {:>8} {:>8} {:>8} {:>8}", class, g(Split::Train), g(Split::Val), g(Split::Test), total)?;
        }
        let t = |s: Split| self.split_total(s);
        write!(
            f,
            "{:<16} {:>8} {:>8} {:>8} {:>8}",
            "all",
            t(Split::Train),
            t(Split::Val),
            t(Split::Test),
            t(Split::Train) + t(Split::Val) + t(Split::Test)
        )
    }
}
