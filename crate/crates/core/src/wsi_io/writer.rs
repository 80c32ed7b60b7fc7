//! Streaming tiled pyramidal TIFF writer.
//!
//! Level-0 tiles are compressed and appended as they arrive (grid order).
//! Reduced levels are built on the fly with a 2×2 box filter: each level keeps
//! only the running sums for the rows it is still waiting on plus one band of
//! finished rows, so memory is bounded by O(width × tile) per level and the
//! full raster is never materialized. IFDs are written after the pixel data.
//!
//! Output is deterministic: fixed deflate level, fixed tag set, little-endian.

use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flate2::write::ZlibEncoder;
use flate2::Compression;

use super::{tile_grid, Mpp, Result, SlideMeta, Tile, TileCoord, TileGrid, WsiError, PAD_COLOR};

/// Reduced levels are added until the largest dimension is at most this.
pub const PYRAMID_MIN_DIM: u32 = 1024;

const DEFLATE_LEVEL: u32 = 6;
/// Switch to BigTIFF when uncompressed pixel data could approach 4 GiB.
const BIGTIFF_THRESHOLD: u64 = 3_500_000_000;

const SHORT: u16 = 3;
const LONG: u16 = 4;
const RATIONAL: u16 = 5;
const LONG8: u16 = 16;

/// Accepts tiles in row-major grid order and writes a tiled pyramidal TIFF.
///
/// Data goes to `<path>.partial` and is renamed on [`SlideWriter::finish`];
/// dropping an unfinished writer removes the partial file.
pub struct SlideWriter {
    final_path: PathBuf,
    tmp_path: PathBuf,
    out: Option<ChunkSink>,
    grid: TileGrid,
    next: usize,
    mpp: Option<Mpp>,
    levels: Vec<LevelIndex>,
    reducers: Vec<Reducer>,
}

struct ChunkSink {
    file: BufWriter<File>,
    pos: u64,
    big: bool,
}

#[derive(Debug, Clone)]
struct LevelIndex {
    width: u32,
    height: u32,
    downsample: u32,
    offsets: Vec<u64>,
    counts: Vec<u64>,
}

/// Builds level `k + 1` from rows of level `k`.
struct Reducer {
    down: Downsampler,
    band: Vec<u8>,
    band_y0: u32,
    band_rows: u32,
}

struct Downsampler {
    src_w: u32,
    src_h: u32,
    dst_w: u32,
    dst_h: u32,
    /// Channel sums for destination rows `acc_y0..`, each at most 4 × 255.
    sums: Vec<u16>,
    acc_y0: u32,
}

impl Downsampler {
    fn new(src_w: u32, src_h: u32) -> Self {
        Self {
            src_w,
            src_h,
            dst_w: src_w.div_ceil(2),
            dst_h: src_h.div_ceil(2),
            sums: Vec::new(),
            acc_y0: 0,
        }
    }

    fn row_len(&self) -> usize {
        self.dst_w as usize * 3
    }

    /// Adds a `w × h` block of source pixels at `(x0, y0)`; `stride` in pixels.
    fn add(&mut self, x0: u32, y0: u32, w: u32, h: u32, data: &[u8], stride: usize) {
        let last_dst_row = (y0 + h - 1) / 2;
        let needed = (last_dst_row - self.acc_y0 + 1) as usize * self.row_len();
        if self.sums.len() < needed {
            self.sums.resize(needed, 0);
        }
        let row_len = self.row_len();
        for dy in 0..h {
            let y = y0 + dy;
            let dst_row = (y / 2 - self.acc_y0) as usize * row_len;
            let src_row = dy as usize * stride * 3;
            for dx in 0..w {
                let s = src_row + dx as usize * 3;
                let d = dst_row + ((x0 + dx) / 2) as usize * 3;
                for c in 0..3 {
                    self.sums[d + c] += data[s + c] as u16;
                }
            }
        }
    }

    /// Finalizes every destination row that depends only on source rows
    /// `< src_rows_done`. Returns `(first_row, rows)`.
    fn finalize(&mut self, src_rows_done: u32) -> (u32, Vec<u8>) {
        let complete = if src_rows_done >= self.src_h { self.dst_h } else { src_rows_done / 2 };
        let start = self.acc_y0;
        if complete <= start {
            return (start, Vec::new());
        }
        let n_rows = (complete - start) as usize;
        let row_len = self.row_len();
        if self.sums.len() < n_rows * row_len {
            self.sums.resize(n_rows * row_len, 0);
        }
        let mut rows = vec![0u8; n_rows * row_len];
        for r in 0..n_rows {
            let y = start + r as u32;
            let cy = (self.src_h - 2 * y).min(2);
            for x in 0..self.dst_w {
                let cx = (self.src_w - 2 * x).min(2);
                let count = (cx * cy) as u16;
                let i = r * row_len + x as usize * 3;
                for c in 0..3 {
                    rows[i + c] = ((self.sums[i + c] + count / 2) / count) as u8;
                }
            }
        }
        self.sums.drain(..n_rows * row_len);
        self.acc_y0 = complete;
        (start, rows)
    }
}

fn pyramid_dims(width: u32, height: u32) -> Vec<(u32, u32)> {
    let mut dims = vec![(width, height)];
    let (mut w, mut h) = (width, height);
    while w.max(h) > PYRAMID_MIN_DIM {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        dims.push((w, h));
    }
    dims
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> WsiError + '_ {
    move |source| WsiError::Io { path: path.to_path_buf(), source }
}

impl ChunkSink {
    fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.file.write_all(bytes)?;
        self.pos += bytes.len() as u64;
        Ok(())
    }

    fn align(&mut self) -> std::io::Result<()> {
        if self.pos % 2 == 1 {
            self.write_all(&[0])?;
        }
        Ok(())
    }

    /// Compresses one tile and returns `(offset, byte_count)`.
    fn write_chunk(&mut self, pixels: &[u8]) -> std::io::Result<(u64, u64)> {
        let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
        enc.write_all(pixels)?;
        let data = enc.finish()?;
        self.align()?;
        let offset = self.pos;
        self.write_all(&data)?;
        Ok((offset, data.len() as u64))
    }
}

impl SlideWriter {
    pub fn create(path: impl AsRef<Path>, meta: &SlideMeta, tile_size: u32) -> Result<Self> {
        if tile_size == 0 || !tile_size.is_multiple_of(16) {
            return Err(WsiError::InvalidTileSize(tile_size, "TIFF tiles must be a multiple of 16"));
        }
        let final_path = path.as_ref().to_path_buf();
        let mut tmp = final_path.clone().into_os_string();
        tmp.push(".partial");
        let tmp_path = PathBuf::from(tmp);
        let grid = tile_grid(meta, tile_size);

        let dims = pyramid_dims(meta.width_px, meta.height_px);
        let raw: u64 = dims.iter().map(|&(w, h)| {
            w.div_ceil(tile_size) as u64 * h.div_ceil(tile_size) as u64 * (tile_size as u64).pow(2) * 3
        }).sum();
        let big = raw > BIGTIFF_THRESHOLD;

        let file = File::create(&tmp_path).map_err(io_err(&tmp_path))?;
        let mut sink = ChunkSink { file: BufWriter::new(file), pos: 0, big };
        let header: Vec<u8> = if big {
            let mut h = b"II".to_vec();
            h.extend_from_slice(&43u16.to_le_bytes());
            h.extend_from_slice(&8u16.to_le_bytes());
            h.extend_from_slice(&0u16.to_le_bytes());
            h.extend_from_slice(&0u64.to_le_bytes());
            h
        } else {
            let mut h = b"II".to_vec();
            h.extend_from_slice(&42u16.to_le_bytes());
            h.extend_from_slice(&0u32.to_le_bytes());
            h
        };
        sink.write_all(&header).map_err(io_err(&tmp_path))?;

        let levels = dims
            .iter()
            .enumerate()
            .map(|(k, &(w, h))| LevelIndex {
                width: w,
                height: h,
                downsample: 1 << k,
                offsets: Vec::new(),
                counts: Vec::new(),
            })
            .collect();
        let reducers = dims[..dims.len() - 1]
            .iter()
            .map(|&(w, h)| Reducer {
                down: Downsampler::new(w, h),
                band: Vec::new(),
                band_y0: 0,
                band_rows: 0,
            })
            .collect();

        Ok(Self {
            final_path,
            tmp_path,
            out: Some(sink),
            grid,
            next: 0,
            mpp: meta.mpp,
            levels,
            reducers,
        })
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    /// The coordinate the writer expects next, if any remain.
    pub fn expected(&self) -> Option<TileCoord> {
        (self.next < self.grid.len()).then(|| self.grid.coord(self.next))
    }

    pub fn push(&mut self, tile: &Tile) -> Result<()> {
        let ts = self.grid.tile_size_px;
        let c = tile.coord;
        self.grid.check(c)?;
        if tile.tile_size != ts || tile.pixels.len() != (ts as usize).pow(2) * 3 {
            return Err(WsiError::BadTileBuffer { col: c.col, row: c.row, tile_size: ts });
        }
        let index = self.grid.index(c);
        if index < self.next {
            return Err(WsiError::DuplicateTile { col: c.col, row: c.row });
        }
        if index > self.next {
            let missing = self.grid.coord(self.next);
            return Err(WsiError::MissingTile { col: missing.col, row: missing.row });
        }
        let rect = self.grid.tile_rect(c);

        let path = self.tmp_path.clone();
        let sink = self.out.as_mut().expect("writer already finished");
        let (offset, count) = if tile.is_border() {
            let mut padded = tile.clone();
            padded.valid_w = rect.w;
            padded.valid_h = rect.h;
            padded.repad();
            sink.write_chunk(&padded.pixels)
        } else {
            sink.write_chunk(&tile.pixels)
        }
        .map_err(io_err(&path))?;
        self.levels[0].offsets.push(offset);
        self.levels[0].counts.push(count);

        if !self.reducers.is_empty() {
            self.reducers[0].down.add(rect.x, rect.y, rect.w, rect.h, &tile.pixels, ts as usize);
        }
        self.next += 1;
        if c.col + 1 == self.grid.cols && !self.reducers.is_empty() {
            self.cascade(0, rect.y + rect.h)?;
        }
        Ok(())
    }

    /// Moves finished rows from reducer `k` into level `k + 1`, emitting its
    /// tiles band by band and recursing into the next reducer.
    fn cascade(&mut self, k: usize, src_rows_done: u32) -> Result<()> {
        let ts = self.grid.tile_size_px;
        let (start, rows) = self.reducers[k].down.finalize(src_rows_done);
        if rows.is_empty() {
            return Ok(());
        }
        let level = k + 1;
        let (lw, lh) = (self.levels[level].width, self.levels[level].height);
        let row_len = lw as usize * 3;
        let n_rows = (rows.len() / row_len) as u32;
        debug_assert_eq!(start, self.reducers[k].band_y0 + self.reducers[k].band_rows);

        let mut r = 0;
        while r < n_rows {
            let red = &mut self.reducers[k];
            let room = ts - red.band_rows;
            let take = room.min(n_rows - r);
            red.band.extend_from_slice(&rows[r as usize * row_len..(r + take) as usize * row_len]);
            red.band_rows += take;
            r += take;
            if red.band_rows == ts || red.band_y0 + red.band_rows == lh {
                self.flush_band(k)?;
            }
        }
        Ok(())
    }

    fn flush_band(&mut self, k: usize) -> Result<()> {
        let ts = self.grid.tile_size_px;
        let level = k + 1;
        let lw = self.levels[level].width;
        let row_len = lw as usize * 3;
        let band = std::mem::take(&mut self.reducers[k].band);
        let band_y0 = self.reducers[k].band_y0;
        let band_rows = self.reducers[k].band_rows;

        let path = self.tmp_path.clone();
        let sink = self.out.as_mut().expect("writer already finished");
        let mut buf = vec![0u8; (ts as usize).pow(2) * 3];
        for col in 0..lw.div_ceil(ts) {
            for px in buf.chunks_exact_mut(3) {
                px.copy_from_slice(&PAD_COLOR);
            }
            let x0 = col * ts;
            let w = ts.min(lw - x0) as usize;
            for y in 0..band_rows as usize {
                let src = y * row_len + x0 as usize * 3;
                let dst = y * ts as usize * 3;
                buf[dst..dst + w * 3].copy_from_slice(&band[src..src + w * 3]);
            }
            let (o, c) = sink.write_chunk(&buf).map_err(io_err(&path))?;
            self.levels[level].offsets.push(o);
            self.levels[level].counts.push(c);
        }

        if level < self.reducers.len() {
            self.reducers[level].down.add(0, band_y0, lw, band_rows, &band, lw as usize);
        }
        let red = &mut self.reducers[k];
        red.band_y0 += band_rows;
        red.band_rows = 0;
        red.band = band;
        red.band.clear();
        if level < self.reducers.len() {
            self.cascade(level, band_y0 + band_rows)?;
        }
        Ok(())
    }

    /// Writes the directory chain and atomically moves the file into place.
    pub fn finish(mut self) -> Result<()> {
        if let Some(missing) = self.expected() {
            return Err(WsiError::MissingTile { col: missing.col, row: missing.row });
        }
        let path = self.tmp_path.clone();
        let mut sink = self.out.take().expect("writer already finished");
        let ts = self.grid.tile_size_px;
        let mut prev_next_field: Option<u64> = None;
        let first_ifd_field = if sink.big { 8 } else { 4 };
        for (k, lvl) in self.levels.iter().enumerate() {
            debug_assert_eq!(
                lvl.offsets.len() as u64,
                lvl.width.div_ceil(ts) as u64 * lvl.height.div_ceil(ts) as u64
            );
            let entries = ifd_entries(lvl, k > 0, ts, self.mpp, sink.big);
            let (ifd_pos, next_field) = write_ifd(&mut sink, &entries).map_err(io_err(&path))?;
            patch_pointer(&mut sink, prev_next_field.unwrap_or(first_ifd_field), ifd_pos)
                .map_err(io_err(&path))?;
            prev_next_field = Some(next_field);
        }
        sink.file.flush().map_err(io_err(&path))?;
        let file = sink.file.into_inner().map_err(|e| io_err(&path)(e.into_error()))?;
        file.sync_all().map_err(io_err(&path))?;
        drop(file);
        std::fs::rename(&self.tmp_path, &self.final_path).map_err(io_err(&self.final_path))?;
        Ok(())
    }
}

impl Drop for SlideWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = std::fs::remove_file(&self.tmp_path);
        }
    }
}

struct Entry {
    tag: u16,
    typ: u16,
    count: u64,
    data: Vec<u8>,
}

fn shorts(tag: u16, vals: &[u16]) -> Entry {
    Entry { tag, typ: SHORT, count: vals.len() as u64, data: vals.iter().flat_map(|v| v.to_le_bytes()).collect() }
}

fn long(tag: u16, v: u32) -> Entry {
    Entry { tag, typ: LONG, count: 1, data: v.to_le_bytes().to_vec() }
}

fn offsets(tag: u16, vals: &[u64], big: bool) -> Entry {
    if big {
        Entry { tag, typ: LONG8, count: vals.len() as u64, data: vals.iter().flat_map(|v| v.to_le_bytes()).collect() }
    } else {
        Entry {
            tag,
            typ: LONG,
            count: vals.len() as u64,
            data: vals.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect(),
        }
    }
}

fn rational(tag: u16, value: f64) -> Entry {
    let (mut num, mut den) = ((value * 1000.0).round(), 1000u32);
    if num > u32::MAX as f64 {
        num = value.round();
        den = 1;
    }
    let mut data = (num as u32).to_le_bytes().to_vec();
    data.extend_from_slice(&den.to_le_bytes());
    Entry { tag, typ: RATIONAL, count: 1, data }
}

fn ifd_entries(lvl: &LevelIndex, reduced: bool, ts: u32, mpp: Option<Mpp>, big: bool) -> Vec<Entry> {
    let mut e = vec![
        long(254, u32::from(reduced)),
        long(256, lvl.width),
        long(257, lvl.height),
        shorts(258, &[8, 8, 8]),
        shorts(259, &[8]),
        shorts(262, &[2]),
        shorts(277, &[3]),
    ];
    if let Some(m) = mpp {
        // Pixels per centimetre at this level.
        let ds = lvl.downsample as f64;
        e.push(rational(282, 10_000.0 / (m.x * ds)));
        e.push(rational(283, 10_000.0 / (m.y * ds)));
    }
    e.push(shorts(284, &[1]));
    if mpp.is_some() {
        e.push(shorts(296, &[3]));
    }
    e.push(long(322, ts));
    e.push(long(323, ts));
    e.push(offsets(324, &lvl.offsets, big));
    e.push(offsets(325, &lvl.counts, big));
    e
}

/// Writes out-of-line values then the IFD itself. Returns the IFD offset and
/// the file offset of its next-IFD field.
fn write_ifd(sink: &mut ChunkSink, entries: &[Entry]) -> std::io::Result<(u64, u64)> {
    let inline = if sink.big { 8 } else { 4 };
    let mut value_offsets = Vec::with_capacity(entries.len());
    for e in entries {
        if e.data.len() > inline {
            sink.align()?;
            value_offsets.push(Some(sink.pos));
            sink.write_all(&e.data)?;
        } else {
            value_offsets.push(None);
        }
    }
    sink.align()?;
    let ifd_pos = sink.pos;
    let mut buf = Vec::new();
    if sink.big {
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    } else {
        buf.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    }
    for (e, off) in entries.iter().zip(&value_offsets) {
        buf.extend_from_slice(&e.tag.to_le_bytes());
        buf.extend_from_slice(&e.typ.to_le_bytes());
        let mut field = vec![0u8; inline];
        match off {
            Some(o) if sink.big => field.copy_from_slice(&o.to_le_bytes()),
            Some(o) => field.copy_from_slice(&(*o as u32).to_le_bytes()),
            None => field[..e.data.len()].copy_from_slice(&e.data),
        }
        if sink.big {
            buf.extend_from_slice(&e.count.to_le_bytes());
        } else {
            buf.extend_from_slice(&(e.count as u32).to_le_bytes());
        }
        buf.extend_from_slice(&field);
    }
    let next_field = ifd_pos + buf.len() as u64;
    buf.extend_from_slice(&vec![0u8; inline]);
    sink.write_all(&buf)?;
    Ok((ifd_pos, next_field))
}

fn patch_pointer(sink: &mut ChunkSink, field: u64, value: u64) -> std::io::Result<()> {
    sink.file.seek(SeekFrom::Start(field))?;
    if sink.big {
        sink.file.write_all(&value.to_le_bytes())?;
    } else {
        sink.file.write_all(&(value as u32).to_le_bytes())?;
    }
    sink.file.seek(SeekFrom::Start(sink.pos))?;
    Ok(())
}

/// Writes a complete grid of tiles, supplied in row-major order, as a tiled
/// pyramidal TIFF at `path`.
pub fn write_slide<I>(tiles: I, meta: &SlideMeta, tile_size: u32, path: impl AsRef<Path>) -> Result<()>
where
    I: IntoIterator<Item = Tile>,
{
    let mut w = SlideWriter::create(path, meta, tile_size)?;
    for tile in tiles {
        w.push(&tile)?;
    }
    w.finish()
}
