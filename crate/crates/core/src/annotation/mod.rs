//! Pathologist ROI annotations and exact per-class tile coverage.

pub mod coverage;
pub mod geometry;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use coverage::{tile_coverage, tile_coverage_with, CoverageVector};
pub use geometry::{Point, Rect};

use geometry::{clip_to_rect, is_simple, orient, shoelace_area, triangulate};

/// Annotation classes. `Questionable` exists only at parse level and never
/// reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GleasonClass {
    Regular,
    Gleason3,
    Gleason4,
    Gleason5,
    ArtefactEmpty,
    ArtefactSponge,
    Questionable,
}

pub const NUM_MODEL_CLASSES: usize = 6;

impl GleasonClass {
    pub const ALL: [GleasonClass; 7] = [
        GleasonClass::Regular,
        GleasonClass::Gleason3,
        GleasonClass::Gleason4,
        GleasonClass::Gleason5,
        GleasonClass::ArtefactEmpty,
        GleasonClass::ArtefactSponge,
        GleasonClass::Questionable,
    ];

    /// The six classes a classifier predicts, in probability-vector order.
    pub const MODEL: [GleasonClass; NUM_MODEL_CLASSES] = [
        GleasonClass::Regular,
        GleasonClass::Gleason3,
        GleasonClass::Gleason4,
        GleasonClass::Gleason5,
        GleasonClass::ArtefactEmpty,
        GleasonClass::ArtefactSponge,
    ];

    /// Position in [`GleasonClass::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Position in the model's probability vector, if this is a model class.
    pub fn model_index(self) -> Option<usize> {
        (self != GleasonClass::Questionable).then_some(self as usize)
    }

    pub fn from_model_index(i: usize) -> Option<Self> {
        Self::MODEL.get(i).copied()
    }

    pub fn is_artefact(self) -> bool {
        matches!(self, GleasonClass::ArtefactEmpty | GleasonClass::ArtefactSponge)
    }

    pub fn is_malignant(self) -> bool {
        matches!(self, GleasonClass::Gleason3 | GleasonClass::Gleason4 | GleasonClass::Gleason5)
    }

    /// Display / file-format name, e.g. `"Gleason 4"`.
    pub fn name(self) -> &'static str {
        match self {
            GleasonClass::Regular => "Regular",
            GleasonClass::Gleason3 => "Gleason 3",
            GleasonClass::Gleason4 => "Gleason 4",
            GleasonClass::Gleason5 => "Gleason 5",
            GleasonClass::ArtefactEmpty => "Artefact Empty",
            GleasonClass::ArtefactSponge => "Artefact Sponge",
            GleasonClass::Questionable => "Questionable",
        }
    }

    /// Parses a class name; case-insensitive, whitespace/underscore tolerant.
    pub fn from_name(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        Some(match norm.as_str() {
            "regular" => GleasonClass::Regular,
            "gleason3" | "g3" => GleasonClass::Gleason3,
            "gleason4" | "g4" => GleasonClass::Gleason4,
            "gleason5" | "g5" => GleasonClass::Gleason5,
            "artefactempty" | "artifactempty" => GleasonClass::ArtefactEmpty,
            "artefactsponge" | "artifactsponge" | "sponge" => GleasonClass::ArtefactSponge,
            "questionable" => GleasonClass::Questionable,
            _ => return None,
        })
    }
}

impl fmt::Display for GleasonClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GleasonClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_name(s).ok_or_else(|| format!("unknown class label {s:?}"))
    }
}

impl Serialize for GleasonClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for GleasonClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown class {s:?}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("malformed annotation document: {0}")]
    Malformed(String),
    #[error("feature {feature}: unknown class label {label:?}")]
    UnknownLabel { feature: usize, label: String },
    #[error("feature {feature}: degenerate polygon ({reason})")]
    Degenerate { feature: usize, reason: &'static str },
    #[error("feature {feature}: polygon is self-intersecting")]
    SelfIntersecting { feature: usize },
    #[error("feature {feature}: polygons with holes are not supported")]
    Hole { feature: usize },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A class-labelled simple polygon in level-0 pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPolygon {
    pub label: GleasonClass,
    vertices: Vec<Point>,
    bbox: Rect,
    /// Ear-clipping triangles of the polygon as drawn (before slide clipping).
    triangles: Vec<[Point; 3]>,
}

impl RoiPolygon {
    /// Validates and builds an ROI: at least three distinct vertices, simple,
    /// positive area. A repeated closing vertex is dropped.
    pub fn new(label: GleasonClass, vertices: Vec<Point>) -> Result<Self, AnnotationError> {
        Self::new_for_feature(0, label, vertices)
    }

    fn new_for_feature(
        feature: usize,
        label: GleasonClass,
        mut vertices: Vec<Point>,
    ) -> Result<Self, AnnotationError> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(AnnotationError::Malformed(format!("feature {feature}: non-finite coordinate")));
        }
        vertices.dedup();
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(AnnotationError::Degenerate { feature, reason: "fewer than 3 distinct vertices" });
        }
        let (p0, p1) = (vertices[0], vertices[1]);
        if vertices.iter().all(|&q| orient(p0, p1, q) == 0.0) {
            return Err(AnnotationError::Degenerate { feature, reason: "collinear vertices" });
        }
        if !is_simple(&vertices) {
            return Err(AnnotationError::SelfIntersecting { feature });
        }
        if shoelace_area(&vertices) <= 0.0 {
            return Err(AnnotationError::Degenerate { feature, reason: "zero area" });
        }
        let triangles = triangulate(&vertices);
        let bbox = Rect::bounding(&vertices);
        Ok(Self { label, vertices, bbox, triangles })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    pub fn triangles(&self) -> &[[Point; 3]] {
        &self.triangles
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    /// Restricts the outline to `bounds`. Triangles keep the drawn outline;
    /// they are only ever intersected with regions inside `bounds`.
    fn clip_to(&mut self, bounds: &Rect) {
        self.vertices = clip_to_rect(&self.vertices, bounds);
        self.bbox = Rect::bounding(&self.vertices);
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mv = |p: &Point| Point::new(p.x + dx, p.y + dy);
        Self {
            label: self.label,
            vertices: self.vertices.iter().map(mv).collect(),
            bbox: self.bbox.translate(dx, dy),
            triangles: self.triangles.iter().map(|t| [mv(&t[0]), mv(&t[1]), mv(&t[2])]).collect(),
        }
    }
}

/// Absolute polygon area in px² (shoelace; orientation independent).
pub fn polygon_area(poly: &RoiPolygon) -> f64 {
    shoelace_area(&poly.vertices)
}

/// All validated ROIs of one slide.
#[derive(Debug, Clone, Default)]
pub struct AnnotationSet {
    pub slide_id: String,
    pub rois: Vec<RoiPolygon>,
    pub warnings: Vec<String>,
}

impl AnnotationSet {
    pub fn new(slide_id: impl Into<String>, rois: Vec<RoiPolygon>) -> Self {
        Self { slide_id: slide_id.into(), rois, warnings: Vec::new() }
    }

    pub fn has_class(&self, c: GleasonClass) -> bool {
        self.rois.iter().any(|r| r.label == c)
    }
}

fn feature_label(feature: usize, props: &Value) -> Result<GleasonClass, AnnotationError> {
    let cls = props.get("classification").ok_or_else(|| {
        AnnotationError::Malformed(format!("feature {feature}: missing properties.classification"))
    })?;
    let name = match cls {
        Value::Object(o) => o.get("name").and_then(Value::as_str),
        Value::String(s) => Some(s.as_str()),
        _ => None,
    }
    .ok_or_else(|| AnnotationError::Malformed(format!("feature {feature}: classification has no name")))?;
    GleasonClass::from_name(name)
        .ok_or_else(|| AnnotationError::UnknownLabel { feature, label: name.to_string() })
}

fn ring(feature: usize, v: &Value) -> Result<Vec<Point>, AnnotationError> {
    let bad = || AnnotationError::Malformed(format!("feature {feature}: ring must be an array of [x, y] positions"));
    v.as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|pos| {
            let a = pos.as_array().filter(|a| a.len() >= 2).ok_or_else(bad)?;
            Ok(Point::new(a[0].as_f64().ok_or_else(bad)?, a[1].as_f64().ok_or_else(bad)?))
        })
        .collect()
}

fn polygon_rings(feature: usize, coords: &Value) -> Result<Vec<Point>, AnnotationError> {
    let rings = coords
        .as_array()
        .ok_or_else(|| AnnotationError::Malformed(format!("feature {feature}: polygon coordinates")))?;
    match rings.len() {
        0 => Err(AnnotationError::Degenerate { feature, reason: "no rings" }),
        1 => ring(feature, &rings[0]),
        _ => Err(AnnotationError::Hole { feature }),
    }
}

/// Parses a GeoJSON `FeatureCollection` (or a bare feature array) of ROI
/// polygons for a slide of `width_px × height_px`.
///
/// Vertices outside the slide are clipped to the slide rectangle with a
/// warning; ROIs lying entirely outside are dropped with a warning.
pub fn parse_annotations(
    doc: &str,
    slide_id: &str,
    width_px: u32,
    height_px: u32,
) -> Result<AnnotationSet, AnnotationError> {
    let root: Value = serde_json::from_str(doc).map_err(|e| AnnotationError::Malformed(e.to_string()))?;
    let features = match &root {
        Value::Object(o) if o.get("type").and_then(Value::as_str) == Some("FeatureCollection") => o
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| AnnotationError::Malformed("FeatureCollection without features".into()))?,
        Value::Array(a) => a,
        _ => return Err(AnnotationError::Malformed("expected a GeoJSON FeatureCollection".into())),
    };
    let bounds = Rect::new(0.0, 0.0, width_px as f64, height_px as f64);
    let mut set = AnnotationSet::new(slide_id, Vec::new());
    for (i, f) in features.iter().enumerate() {
        let geom = f
            .get("geometry")
            .filter(|g| !g.is_null())
            .ok_or_else(|| AnnotationError::Malformed(format!("feature {i}: missing geometry")))?;
        let label = feature_label(i, f.get("properties").unwrap_or(&Value::Null))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| AnnotationError::Malformed(format!("feature {i}: missing coordinates")))?;
        let outlines = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![polygon_rings(i, coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| AnnotationError::Malformed(format!("feature {i}: multipolygon coordinates")))?
                .iter()
                .map(|p| polygon_rings(i, p))
                .collect::<Result<_, _>>()?,
            other => {
                return Err(AnnotationError::Malformed(format!(
                    "feature {i}: unsupported geometry type {other:?}"
                )))
            }
        };
        for outline in outlines {
            let mut roi = RoiPolygon::new_for_feature(i, label, outline)?;
            let b = roi.bbox();
            if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > bounds.x1 || b.y1 > bounds.y1 {
                roi.clip_to(&bounds);
                if shoelace_area(roi.vertices()) <= 0.0 {
                    set.warnings.push(format!("feature {i} ({label}) lies outside the slide; dropped"));
                    continue;
                }
                set.warnings.push(format!("feature {i} ({label}) clipped to the slide rectangle"));
            }
            set.rois.push(roi);
        }
    }
    for w in &set.warnings {
        tracing::warn!(slide = slide_id, "{w}");
    }
    Ok(set)
}

pub fn parse_annotations_file(
    path: impl AsRef<Path>,
    slide_id: &str,
    width_px: u32,
    height_px: u32,
) -> Result<AnnotationSet, AnnotationError> {
    let p = path.as_ref();
    let doc = std::fs::read_to_string(p)
        .map_err(|e| AnnotationError::Io { path: p.display().to_string(), source: e })?;
    parse_annotations(&doc, slide_id, width_px, height_px)
}

/// Serializes ROIs back to the GeoJSON exchange format.
pub fn to_geojson(rois: &[RoiPolygon]) -> Value {
    let features: Vec<Value> = rois
        .iter()
        .map(|r| {
            let mut ring: Vec<Value> = r.vertices().iter().map(|p| serde_json::json!([p.x, p.y])).collect();
            ring.push(ring[0].clone());
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring] },
                "properties": { "classification": { "name": r.label.name() } }
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}
