//! Synthetic slides, annotation documents and lookup tables.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilegrade_core::wsi_io::{tile_grid, write_slide, SlideMeta, Tile, TileGrid};

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic H&E-ish texture: pink/purple base with per-pixel noise.
pub fn texture(x: u32, y: u32, seed: u64) -> [u8; 3] {
    let h = mix(seed ^ ((y as u64) << 32 | x as u64));
    let blob = (((x / 37) ^ (y / 53)) & 3) as u8;
    [
        180u8.wrapping_add(blob * 12).wrapping_add((h & 31) as u8),
        90u8.wrapping_add(blob * 20).wrapping_add((h >> 8 & 31) as u8),
        150u8.wrapping_add(blob * 8).wrapping_add((h >> 16 & 31) as u8),
    ]
}

pub fn slide_tiles(meta: &SlideMeta, ts: u32, seed: u64) -> impl Iterator<Item = Tile> + '_ {
    let grid = tile_grid(meta, ts);
    let coords: Vec<_> = grid.coords().collect();
    coords.into_iter().map(move |c| {
        let r = grid.tile_rect(c);
        let mut t = Tile::blank(c, ts, r.w, r.h);
        for y in 0..r.h {
            for x in 0..r.w {
                t.set_pixel(x, y, texture(r.x + x, r.y + y, seed));
            }
        }
        t
    })
}

/// Writes a `w × h` synthetic slide as a tiled pyramidal TIFF.
pub fn write_synthetic_slide(path: &Path, w: u32, h: u32, seed: u64) -> SlideMeta {
    let meta = SlideMeta::new(w, h, None);
    write_slide(slide_tiles(&meta, 512, seed), &meta, 512, path).unwrap();
    meta
}

/// GeoJSON feature collection with one polygon per `(class name, ring)`.
pub fn geojson(features: &[(&str, &[(f64, f64)])]) -> String {
    let mut out = String::from(r#"{"type":"FeatureCollection","features":["#);
    for (i, (label, ring)) in features.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let mut coords: Vec<String> = ring.iter().map(|(x, y)| format!("[{x},{y}]")).collect();
        coords.push(coords[0].clone());
        write!(
            out,
            r#"{{"type":"Feature","properties":{{"classification":{{"name":"{label}"}}}},"geometry":{{"type":"Polygon","coordinates":[[{}]]}}}}"#,
            coords.join(",")
        )
        .unwrap();
    }
    out.push_str("]}");
    out
}

pub fn rect_ring(x0: f64, y0: f64, x1: f64, y1: f64) -> [(f64, f64); 4] {
    [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
}

/// Random probability vectors for every tile of `grid`, as a lookup CSV.
pub fn write_lookup(path: &Path, slide_id: &str, grid: &TileGrid, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("slide_id,col,row,p_regular,p_g3,p_g4,p_g5,p_art_empty,p_art_sponge\n");
    for c in grid.coords() {
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<String> = raw.iter().map(|v| format!("{}", v / s)).collect();
        writeln!(out, "{slide_id},{},{},{}", c.col, c.row, p.join(",")).unwrap();
    }
    std::fs::write(path, out).unwrap();
}
