use serde::{Deserialize, Serialize};

use super::geometry::{clip_to_convex, clip_to_rect, shoelace_area, Rect};
use super::{AnnotationSet, GleasonClass, RoiPolygon};

/// Two ROIs overlap when their shared area within a tile exceeds this
/// fraction of the tile's valid area.
pub const OVERLAP_TOLERANCE: f64 = 1e-6;

/// Fraction of a tile's valid area covered by each class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageVector {
    /// Indexed by [`GleasonClass::index`].
    pub fractions: [f64; 7],
    /// Two ROIs of the same class overlap inside the tile (sum clamped to 1).
    pub same_class_overlap: bool,
    /// ROIs of different classes overlap inside the tile.
    pub cross_class_overlap: bool,
}

impl CoverageVector {
    pub fn get(&self, c: GleasonClass) -> f64 {
        self.fractions[c.index()]
    }

    pub fn set(&mut self, c: GleasonClass, v: f64) {
        self.fractions[c.index()] = v;
    }

    pub fn from_pairs(pairs: &[(GleasonClass, f64)]) -> Self {
        let mut v = Self::default();
        for &(c, f) in pairs {
            v.set(c, f);
        }
        v
    }

    pub fn total(&self) -> f64 {
        self.fractions.iter().sum()
    }
}

/// Area of `a ∩ b ∩ rect`, using `a`'s triangulation as convex clip windows.
fn intersection_area(a: &RoiPolygon, b: &RoiPolygon, rect: &Rect) -> f64 {
    let b_in = clip_to_rect(b.vertices(), rect);
    if b_in.len() < 3 {
        return 0.0;
    }
    let window = Rect::bounding(&b_in);
    a.triangles()
        .iter()
        .filter(|t| Rect::bounding(&t[..]).overlaps(&window))
        .map(|t| shoelace_area(&clip_to_convex(&b_in, &t[..])))
        .sum()
}

/// Per-class coverage of `tile` (the tile's valid extent, padding excluded).
pub fn tile_coverage(tile: &Rect, annotations: &AnnotationSet) -> CoverageVector {
    tile_coverage_with(tile, annotations, true)
}

/// As [`tile_coverage`], optionally skipping the bounding-box pruning step.
/// Both paths return identical results.
pub fn tile_coverage_with(tile: &Rect, annotations: &AnnotationSet, prune: bool) -> CoverageVector {
    let tile_area = tile.area();
    let mut cov = CoverageVector::default();
    if tile_area <= 0.0 {
        return cov;
    }
    let mut sums = [0.0f64; 7];
    let mut hits: Vec<&RoiPolygon> = Vec::new();
    for roi in &annotations.rois {
        if prune && !roi.bbox().overlaps(tile) {
            continue;
        }
        let a = shoelace_area(&clip_to_rect(roi.vertices(), tile));
        if a > 0.0 {
            sums[roi.label.index()] += a;
            hits.push(roi);
        }
    }
    for i in 0..hits.len() {
        for j in (i + 1)..hits.len() {
            let (a, b) = (hits[i], hits[j]);
            if !a.bbox().overlaps(&b.bbox()) {
                continue;
            }
            if intersection_area(a, b, tile) > OVERLAP_TOLERANCE * tile_area {
                if a.label == b.label {
                    cov.same_class_overlap = true;
                } else {
                    cov.cross_class_overlap = true;
                }
            }
        }
    }
    for (f, s) in cov.fractions.iter_mut().zip(sums) {
        *f = (s / tile_area).min(1.0);
    }
    cov
}
