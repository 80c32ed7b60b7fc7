//! Heatmap tinting of predicted tiles and reassembly into an output slide.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{GleasonClass, NUM_MODEL_CLASSES};
use crate::exec::{self, Execution};
use crate::inference::{ClassProbabilities, Prediction};
use crate::wsi_io::{self, Slide, SlideWriter, Tile, TileCoord, WsiError};

#[derive(Debug, thiserror::Error)]
pub enum OverlayError {
    #[error("no prediction for tile ({0}, {1})")]
    MissingPrediction(u32, u32),
    #[error("more than one prediction for tile ({0}, {1})")]
    DuplicatePrediction(u32, u32),
    #[error("prediction for tile ({0}, {1}) lies outside the grid")]
    OutsideGrid(u32, u32),
    #[error("{0} has no overlay color")]
    Unmapped(GleasonClass),
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("unknown class name {0:?} in color map")]
    UnknownClass(String),
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: String, reason: String },
    #[error(transparent)]
    Wsi(#[from] WsiError),
}

pub type Rgb = [u8; 3];

pub const DEFAULT_COLORS: [Rgb; NUM_MODEL_CLASSES] =
    [[0, 170, 0], [255, 215, 0], [255, 140, 0], [220, 0, 0], [200, 200, 200], [130, 130, 130]];
pub const DEFAULT_ALPHA: f64 = 0.35;
const HALF_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorMap {
    /// Indexed by model class.
    pub colors: [Rgb; NUM_MODEL_CLASSES],
    pub alpha: f64,
    /// Tiles whose top probability is below this stay untinted.
    pub threshold: f64,
    /// Scale alpha by the top probability instead of a solid tint.
    pub graded: bool,
    pub tint_artefacts: bool,
}

impl Default for ColorMap {
    fn default() -> Self {
        Self { colors: DEFAULT_COLORS, alpha: DEFAULT_ALPHA, threshold: 0.0, graded: false, tint_artefacts: true }
    }
}

impl ColorMap {
    pub fn validate(&self) -> Result<(), OverlayError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(OverlayError::BadAlpha(self.alpha));
        }
        Ok(())
    }

    pub fn with_color(mut self, class: GleasonClass, rgb: Rgb) -> Result<Self, OverlayError> {
        let i = class.model_index().ok_or(OverlayError::Unmapped(class))?;
        self.colors[i] = rgb;
        Ok(self)
    }

    /// Applies overrides keyed by class name.
    pub fn with_overrides(mut self, overrides: &BTreeMap<String, Rgb>) -> Result<Self, OverlayError> {
        for (name, rgb) in overrides {
            let class = GleasonClass::from_name(name).ok_or_else(|| OverlayError::UnknownClass(name.clone()))?;
            self = self.with_color(class, *rgb)?;
        }
        Ok(self)
    }

    /// Alpha to use for a tile with these probabilities, or `None` to
    /// leave it untinted.
    pub fn tint_for(&self, probs: &ClassProbabilities) -> Option<(Rgb, f64)> {
        let label = probs.label();
        if probs.max() < self.threshold || (label.is_artefact() && !self.tint_artefacts) {
            return None;
        }
        let alpha = if self.graded { self.alpha * probs.max() } else { self.alpha };
        Some((self.colors[probs.argmax()], alpha))
    }
}

pub fn class_color(label: GleasonClass, map: &ColorMap) -> Result<Rgb, OverlayError> {
    label.model_index().map(|i| map.colors[i]).ok_or(OverlayError::Unmapped(label))
}

/// `round((1 − α)·src + α·color)` over the valid extent, rounding half up.
pub fn blend_tile(tile: &Tile, color: Rgb, alpha: f64) -> Tile {
    let mut out = tile.clone();
    blend_in_place(&mut out, color, alpha);
    out
}

pub fn blend_in_place(tile: &mut Tile, color: Rgb, alpha: f64) {
    let alpha = alpha.clamp(0.0, 1.0);
    if alpha == 0.0 {
        return;
    }
    let ts = tile.tile_size as usize;
    for y in 0..tile.valid_h as usize {
        let row = &mut tile.pixels[y * ts * 3..(y * ts + tile.valid_w as usize) * 3];
        for px in row.chunks_exact_mut(3) {
            for c in 0..3 {
                let v = px[c] as f64 + alpha * (color[c] as f64 - px[c] as f64);
                // Exact halves of decimal alphas can land a few ulps low.
                px[c] = (v + 0.5 + HALF_SLACK).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Tints `tile` according to its prediction.
pub fn render_tile(tile: &mut Tile, probs: &ClassProbabilities, map: &ColorMap) {
    if let Some((color, alpha)) = map.tint_for(probs) {
        blend_in_place(tile, color, alpha);
    }
}

/// Tiles processed per parallel round; bounds memory held at once.
const BAND_TILES: usize = 64;

/// Writes a tinted copy of `slide` to `out`. Every grid tile needs exactly
/// one prediction.
pub fn reconstruct_overlay(
    slide: &Slide,
    predictions: &[Prediction],
    map: &ColorMap,
    tile_size: u32,
    out: &Path,
    exec: Execution,
) -> Result<(), OverlayError> {
    map.validate()?;
    let grid = slide.grid(tile_size);
    let mut by_index: Vec<Option<&Prediction>> = vec![None; grid.len()];
    for p in predictions {
        let TileCoord { col, row } = p.coord;
        if !grid.contains(p.coord) {
            return Err(OverlayError::OutsideGrid(col, row));
        }
        let slot = &mut by_index[grid.index(p.coord)];
        if slot.is_some() {
            return Err(OverlayError::DuplicatePrediction(col, row));
        }
        *slot = Some(p);
    }
    if let Some(i) = by_index.iter().position(Option::is_none) {
        let c = grid.coord(i);
        return Err(OverlayError::MissingPrediction(c.col, c.row));
    }

    let mut writer = SlideWriter::create(out, slide.meta(), tile_size)?;
    let coords: Vec<TileCoord> = grid.coords().collect();
    for band in coords.chunks(BAND_TILES) {
        let tiles = exec::try_map(exec, band, |&c| {
            let mut tile = wsi_io::read_tile(slide, c, tile_size)?;
            let p = by_index[grid.index(c)].expect("checked above");
            render_tile(&mut tile, &p.probs, map);
            Ok::<_, WsiError>(tile)
        })?;
        for t in &tiles {
            writer.push(t)?;
        }
    }
    writer.finish()?;
    Ok(())
}

pub const SIDECAR_HEADER: [&str; 10] =
    ["slide_id", "col", "row", "p_regular", "p_g3", "p_g4", "p_g5", "p_art_empty", "p_art_sponge", "label"];

/// Incremental writer for the per-tile prediction CSV.
pub struct SidecarWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl SidecarWriter<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self, OverlayError> {
        let inner = csv::Writer::from_path(path)
            .map_err(|e| OverlayError::Sidecar { path: path.display().to_string(), reason: e.to_string() })?;
        Self::new(inner)
    }
}

impl<W: std::io::Write> SidecarWriter<W> {
    pub fn from_writer(w: W) -> Result<Self, OverlayError> {
        Self::new(csv::Writer::from_writer(w))
    }

    fn new(mut inner: csv::Writer<W>) -> Result<Self, OverlayError> {
        inner.write_record(SIDECAR_HEADER).map_err(sidecar_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, p: &Prediction) -> Result<(), OverlayError> {
        let mut rec = vec![p.slide_id.clone(), p.coord.col.to_string(), p.coord.row.to_string()];
        rec.extend(p.probs.as_array().iter().map(|v| v.to_string()));
        rec.push(p.label.name().to_string());
        self.inner.write_record(&rec).map_err(sidecar_err)
    }

    pub fn finish(mut self) -> Result<W, OverlayError> {
        self.inner.flush().map_err(|e| OverlayError::Sidecar { path: String::new(), reason: e.to_string() })?;
        self.inner.into_inner().map_err(|e| OverlayError::Sidecar { path: String::new(), reason: e.to_string() })
    }
}

fn sidecar_err(e: csv::Error) -> OverlayError {
    OverlayError::Sidecar { path: String::new(), reason: e.to_string() }
}

pub fn write_sidecar(predictions: &[Prediction], path: &Path) -> Result<(), OverlayError> {
    let mut w = SidecarWriter::create(path)?;
    for p in predictions {
        w.write(p)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<Prediction>, OverlayError> {
    let err = |reason: String| OverlayError::Sidecar { path: path.display().to_string(), reason };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = r.headers().map_err(|e| err(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != SIDECAR_HEADER {
        return Err(err(format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let line = i + 2;
        let int = |k: usize| rec[k].parse::<u32>().map_err(|e| err(format!("line {line}: {e}")));
        let probs: Vec<f64> = (3..9)
            .map(|k| rec[k].parse::<f64>().map_err(|e| err(format!("line {line}: {e}"))))
            .collect::<Result<_, _>>()?;
        let probs = ClassProbabilities::normalize(&probs).map_err(|e| err(format!("line {line}: {e}")))?;
        out.push(Prediction::new(&rec[0], TileCoord::new(int(1)?, int(2)?), probs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(rgb: Rgb, ts: u32, vw: u32, vh: u32) -> Tile {
        let mut t = Tile::blank(TileCoord::new(0, 0), ts, vw, vh);
        for y in 0..vh {
            for x in 0..vw {
                t.set_pixel(x, y, rgb);
            }
        }
        t
    }

    #[test]
    fn colors() {
        let m = ColorMap::default();
        assert_eq!(class_color(GleasonClass::Regular, &m).unwrap(), [0, 170, 0]);
        assert_eq!(class_color(GleasonClass::Gleason5, &m).unwrap(), [220, 0, 0]);
        let m = m.with_color(GleasonClass::Gleason3, [1, 2, 3]).unwrap();
        assert_eq!(class_color(GleasonClass::Gleason3, &m).unwrap(), [1, 2, 3]);
        assert!(class_color(GleasonClass::Questionable, &m).is_err());
        let mut o = BTreeMap::new();
        o.insert("Gleason 4".to_string(), [9, 9, 9]);
        assert_eq!(ColorMap::default().with_overrides(&o).unwrap().colors[2], [9, 9, 9]);
    }

    #[test]
    fn blend_examples() {
        let t = solid([255, 255, 255], 4, 4, 4);
        assert_eq!(blend_tile(&t, [255, 0, 0], 0.0), t);
        assert_eq!(blend_tile(&t, [255, 0, 0], 0.5).pixel(0, 0), [255, 128, 128]);
        let full = blend_tile(&solid([10, 20, 30], 4, 3, 2), [1, 2, 3], 1.0);
        assert_eq!(full.pixel(2, 1), [1, 2, 3]);
        assert_eq!(full.pixel(3, 1), [255, 255, 255]);
        assert_eq!(full.pixel(0, 2), [255, 255, 255]);
    }

    #[test]
    fn threshold_and_artefact_switch() {
        let uniform = ClassProbabilities::uniform();
        let m = ColorMap::default();
        assert_eq!(m.tint_for(&uniform), Some(([0, 170, 0], 0.35)));
        let strict = ColorMap { threshold: 0.9, ..ColorMap::default() };
        assert_eq!(strict.tint_for(&uniform), None);
        let art = ClassProbabilities::normalize(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let quiet = ColorMap { tint_artefacts: false, ..ColorMap::default() };
        assert_eq!(quiet.tint_for(&art), None);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = Prediction::new(
            "s1",
            TileCoord::new(3, 4),
            ClassProbabilities::normalize(&[0.1, 0.2, 0.3, 0.2, 0.1, 0.1]).unwrap(),
        );
        write_sidecar(std::slice::from_ref(&p), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("slide_id,col,row,p_regular,p_g3,p_g4,p_g5,p_art_empty,p_art_sponge,label\n"));
        assert_eq!(read_sidecar(&path).unwrap(), vec![p]);
    }

    proptest! {
        #[test]
        fn blend_stays_between_source_and_color(
            src in any::<[u8; 3]>(), color in any::<[u8; 3]>(), alpha in 0.0f64..=1.0,
        ) {
            let out = blend_tile(&solid(src, 2, 2, 2), color, alpha).pixel(1, 1);
            for c in 0..3 {
                prop_assert!(out[c] >= src[c].min(color[c]) && out[c] <= src[c].max(color[c]));
            }
        }
    }
}
