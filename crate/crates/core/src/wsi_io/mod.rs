//! Slide access: opening tiled/strip TIFF or PNG rasters, the tile grid, and
//! the deterministic tiled pyramidal TIFF writer.

mod reader;
mod writer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use reader::{open_slide, read_tile};
pub use writer::{write_slide, SlideWriter, PYRAMID_MIN_DIM};

/// Default tile edge in level-0 pixels.
pub const DEFAULT_TILE_SIZE: u32 = 1024;

/// Border tiles are padded with white, the H&E background color.
pub const PAD_COLOR: [u8; 3] = [255, 255, 255];

#[derive(Debug, thiserror::Error)]
pub enum WsiError {
    #[error("slide not found: {0}")]
    Missing(PathBuf),
    #[error("unreadable or truncated image {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("unsupported image encoding in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("tile ({col}, {row}) is outside the {cols}x{rows} grid")]
    OutOfGrid { col: u32, row: u32, cols: u32, rows: u32 },
    #[error("missing tile ({col}, {row}) in slide stream")]
    MissingTile { col: u32, row: u32 },
    #[error("duplicate tile ({col}, {row}) in slide stream")]
    DuplicateTile { col: u32, row: u32 },
    #[error("invalid tile size {0}: {1}")]
    InvalidTileSize(u32, &'static str),
    #[error("tile buffer for ({col}, {row}) does not match tile size {tile_size}")]
    BadTileBuffer { col: u32, row: u32, tile_size: u32 },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, WsiError>;

/// One resolution level of a slide pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub downsample: f64,
    pub width: u32,
    pub height: u32,
}

/// Physical pixel size in microns, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mpp {
    pub x: f64,
    pub y: f64,
}

/// Geometry and metadata of a slide, detached from its pixel source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub width_px: u32,
    pub height_px: u32,
    pub levels: Vec<Level>,
    /// `None` when the file carries no usable resolution metadata.
    pub mpp: Option<Mpp>,
}

impl SlideMeta {
    pub fn new(width_px: u32, height_px: u32, mpp: Option<Mpp>) -> Self {
        Self {
            width_px,
            height_px,
            levels: vec![Level { downsample: 1.0, width: width_px, height: height_px }],
            mpp,
        }
    }
}

/// An opened slide. Immutable after open and shareable across reader threads.
pub struct Slide {
    pub(crate) meta: SlideMeta,
    pub(crate) path: PathBuf,
    pub(crate) source: reader::Source,
}

impl std::fmt::Debug for Slide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Slide").field("path", &self.path).field("meta", &self.meta).finish()
    }
}

impl Slide {
    pub fn width_px(&self) -> u32 {
        self.meta.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.meta.height_px
    }

    pub fn levels(&self) -> &[Level] {
        &self.meta.levels
    }

    pub fn mpp(&self) -> Option<Mpp> {
        self.meta.mpp
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn meta(&self) -> &SlideMeta {
        &self.meta
    }

    /// File stem, used as the slide identifier in manifests and CSVs.
    pub fn id(&self) -> String {
        self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn grid(&self, tile_size_px: u32) -> TileGrid {
        tile_grid(&self.meta, tile_size_px)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub col: u32,
    pub row: u32,
}

impl TileCoord {
    pub fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }
}

/// Axis-aligned pixel rectangle `[x, x + w) × [y, y + h)` at level 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Non-overlapping partition of the level-0 raster into square tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size_px: u32,
    pub cols: u32,
    pub rows: u32,
    pub width_px: u32,
    pub height_px: u32,
}

/// Builds the tile grid for a slide; the last row and column may be partial.
///
/// # Panics
/// If `tile_size_px` is zero.
pub fn tile_grid(meta: &SlideMeta, tile_size_px: u32) -> TileGrid {
    assert!(tile_size_px >= 1, "tile size must be at least 1 px");
    TileGrid {
        tile_size_px,
        cols: meta.width_px.div_ceil(tile_size_px),
        rows: meta.height_px.div_ceil(tile_size_px),
        width_px: meta.width_px,
        height_px: meta.height_px,
    }
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: TileCoord) -> bool {
        c.col < self.cols && c.row < self.rows
    }

    /// Row-major index of a coordinate.
    pub fn index(&self, c: TileCoord) -> usize {
        c.row as usize * self.cols as usize + c.col as usize
    }

    pub fn coord(&self, index: usize) -> TileCoord {
        let cols = self.cols as usize;
        TileCoord::new((index % cols) as u32, (index / cols) as u32)
    }

    /// Row-major enumeration of every tile coordinate.
    pub fn coords(&self) -> impl Iterator<Item = TileCoord> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| TileCoord::new(col, row)))
    }

    /// The valid (unpadded) extent of a tile.
    pub fn tile_rect(&self, c: TileCoord) -> PixelRect {
        let x = c.col * self.tile_size_px;
        let y = c.row * self.tile_size_px;
        PixelRect {
            x,
            y,
            w: self.tile_size_px.min(self.width_px - x),
            h: self.tile_size_px.min(self.height_px - y),
        }
    }

    pub fn check(&self, c: TileCoord) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(WsiError::OutOfGrid { col: c.col, row: c.row, cols: self.cols, rows: self.rows })
        }
    }
}

/// A square RGB8 tile. Pixels beyond `(valid_w, valid_h)` hold [`PAD_COLOR`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub coord: TileCoord,
    pub tile_size: u32,
    pub valid_w: u32,
    pub valid_h: u32,
    /// Row-major RGB, `tile_size * tile_size * 3` bytes.
    pub pixels: Vec<u8>,
}

impl Tile {
    /// An all-pad tile with the given valid extent.
    pub fn blank(coord: TileCoord, tile_size: u32, valid_w: u32, valid_h: u32) -> Self {
        let n = tile_size as usize * tile_size as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&PAD_COLOR);
        }
        Self { coord, tile_size, valid_w, valid_h, pixels }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.tile_size as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.tile_size as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_border(&self) -> bool {
        self.valid_w < self.tile_size || self.valid_h < self.tile_size
    }

    /// Overwrites everything outside the valid extent with the pad color.
    pub fn repad(&mut self) {
        if !self.is_border() {
            return;
        }
        for y in 0..self.tile_size {
            let x0 = if y < self.valid_h { self.valid_w } else { 0 };
            for x in x0..self.tile_size {
                self.set_pixel(x, y, PAD_COLOR);
            }
        }
    }
}
