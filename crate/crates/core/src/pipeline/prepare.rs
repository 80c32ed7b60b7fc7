use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Context, PipelineConfig, PipelineError};
use crate::annotation::{self, coverage, geometry::Rect, GleasonClass};
use crate::dataset::{self, LabeledTile, SplitSummary};
use crate::exec::{self, Execution};
use crate::wsi_io::{self, Slide, TileCoord};

pub const SLIDE_EXTENSIONS: [&str; 5] = ["tif", "tiff", "svs", "btf", "png"];
pub const ANNOTATION_EXTENSIONS: [&str; 2] = ["geojson", "json"];

#[derive(Debug, Clone, Serialize)]
pub struct PrepareSummary {
    pub slides: usize,
    pub tiles_scanned: usize,
    pub tiles_labeled: usize,
    pub tiles_written: usize,
    pub manifest: PathBuf,
    pub splits: SplitSummary,
    pub warnings: Vec<String>,
}

fn files_with(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry.context(|| format!("listing {}", dir.display()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Tiles one slide and labels every tile from its annotation coverage.
fn label_slide(slide: &Slide, ann: &Path, tile_size: u32, exec: Execution) -> Result<(Vec<LabeledTile>, Vec<String>), PipelineError> {
    let id = slide.id();
    let set = annotation::parse_annotations_file(ann, &id, slide.width_px(), slide.height_px())
        .context(|| format!("slide {id}: parsing {}", ann.display()))?;
    let grid = slide.grid(tile_size);
    let coords: Vec<TileCoord> = grid.coords().collect();
    let tiles = exec::map(exec, &coords, |&c| {
        let r = grid.tile_rect(c);
        let rect = Rect::new(r.x as f64, r.y as f64, (r.x + r.w) as f64, (r.y + r.h) as f64);
        LabeledTile::new(id.clone(), c, coverage::tile_coverage(&rect, &set))
    });
    let mut warnings: Vec<String> = set.warnings.iter().map(|w| format!("slide {id}: {w}")).collect();
    let overlaps = tiles.iter().filter(|t| t.coverage.same_class_overlap || t.coverage.cross_class_overlap).count();
    if overlaps > 0 {
        warnings.push(format!("slide {id}: {overlaps} tiles contain overlapping ROIs"));
    }
    if !set.rois.is_empty() && set.rois.iter().all(|r| r.label == GleasonClass::Questionable) {
        warnings.push(format!("slide {id}: only Questionable ROIs; all its tiles are discarded"));
    }
    Ok((tiles, warnings))
}

/// Tiling → coverage → labels → questionable filter → split → balance →
/// manifest. Slides and annotation documents are matched by file stem.
pub fn prepare(
    slides_dir: &Path,
    annotations_dir: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<PrepareSummary, PipelineError> {
    cfg.validate()?;
    let slides = files_with(slides_dir, &SLIDE_EXTENSIONS)?;
    if slides.is_empty() {
        return Err(PipelineError::NoSlides(slides_dir.to_path_buf()));
    }
    let annotations = files_with(annotations_dir, &ANNOTATION_EXTENSIONS)?;
    let mut warnings = Vec::new();
    for stem in annotations.keys().filter(|s| !slides.contains_key(*s)) {
        warnings.push(format!("annotation {stem} has no matching slide"));
    }
    if let Some(stem) = slides.keys().find(|s| !annotations.contains_key(*s)) {
        return Err(PipelineError::UnmatchedSlide(stem.clone()));
    }

    let exec = Execution::default();
    exec::with_workers(cfg.workers, || {
        let mut opened = BTreeMap::new();
        let mut all = Vec::new();
        for (stem, path) in &slides {
            let slide = wsi_io::open_slide(path).context(|| format!("slide {stem}: opening"))?;
            let (tiles, w) = label_slide(&slide, &annotations[stem], cfg.tile_size_px, exec)?;
            tracing::info!(slide = %stem, tiles = tiles.len(), "labeled");
            warnings.extend(w);
            all.extend(tiles);
            opened.insert(slide.id(), slide);
        }
        let tiles_scanned = all.len();
        let labeled = dataset::filter_questionable(all);
        let tiles_labeled = labeled.len();
        let split = dataset::stratified_split(labeled, &cfg.split).context(|| "splitting".into())?;
        let balanced = if cfg.balance_enabled {
            dataset::balance_splits(split, &cfg.balance, cfg.split.seed).context(|| "balancing".into())?
        } else {
            split
        };
        if balanced.is_empty() {
            warnings.push("no labeled tiles; the manifest is empty".into());
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }

        let ts = cfg.tile_size_px;
        let manifest = dataset::write_manifest(&balanced, out_dir, exec, |t| {
            Ok(wsi_io::read_tile(&opened[&t.slide_id], t.coord, ts)?)
        })
        .context(|| format!("writing manifest to {}", out_dir.display()))?;
        Ok(PrepareSummary {
            slides: slides.len(),
            tiles_scanned,
            tiles_labeled,
            tiles_written: balanced.len(),
            manifest,
            splits: SplitSummary::from_tiles(&balanced),
            warnings,
        })
    })
}
