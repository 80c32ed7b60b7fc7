use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::RgbImage;
use tiff::decoder::{ChunkType, Decoder, DecodingResult, Limits};
use tiff::tags::Tag;
use tiff::{ColorType, TiffError};

use super::{Level, Mpp, Result, Slide, SlideMeta, Tile, TileCoord, WsiError};

type TiffDecoder = Decoder<BufReader<File>>;

pub(crate) enum Source {
    Tiff(TiffSource),
    Raster(Arc<RgbImage>),
}

pub(crate) struct TiffSource {
    chunk_type: ChunkType,
    chunk_w: u32,
    chunk_h: u32,
    layout: SampleLayout,
    /// Idle decoders, each positioned on level 0, plus their last decoded chunk.
    pool: Mutex<Vec<PooledDecoder>>,
}

struct PooledDecoder {
    decoder: TiffDecoder,
    cached: Option<(u32, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleLayout {
    Rgb,
    Rgba,
    Gray,
    GrayA,
}

impl SampleLayout {
    fn samples(self) -> usize {
        match self {
            SampleLayout::Rgb => 3,
            SampleLayout::Rgba => 4,
            SampleLayout::Gray => 1,
            SampleLayout::GrayA => 2,
        }
    }
}

fn unreadable(path: &Path, reason: impl ToString) -> WsiError {
    WsiError::Unreadable { path: path.to_path_buf(), reason: reason.to_string() }
}

fn unsupported(path: &Path, reason: impl ToString) -> WsiError {
    WsiError::Unsupported { path: path.to_path_buf(), reason: reason.to_string() }
}

fn map_tiff(path: &Path, e: TiffError) -> WsiError {
    match e {
        TiffError::UnsupportedError(u) => unsupported(path, u),
        other => unreadable(path, other),
    }
}

/// Opens a slide from a tiled/strip TIFF (pyramidal or single level) or a PNG raster.
pub fn open_slide(path: impl AsRef<Path>) -> Result<Slide> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(WsiError::Missing(path.to_path_buf()));
    }
    let mut magic = [0u8; 8];
    {
        let mut f =
            File::open(path).map_err(|e| WsiError::Io { path: path.to_path_buf(), source: e })?;
        let mut read = 0;
        while read < magic.len() {
            match f.read(&mut magic[read..]) {
                Ok(0) => break,
                Ok(n) => read += n,
                Err(e) => return Err(WsiError::Io { path: path.to_path_buf(), source: e }),
            }
        }
        if read < 4 {
            return Err(unreadable(path, "file too short to carry an image header"));
        }
    }
    match &magic[..4] {
        b"II*\0" | b"MM\0*" | b"II+\0" | b"MM\0+" => open_tiff(path),
        [0x89, b'P', b'N', b'G'] => open_png(path),
        _ => Err(unsupported(path, "not a TIFF or PNG file")),
    }
}

fn open_png(path: &Path) -> Result<Slide> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::Unsupported(u) => unsupported(path, u),
        other => unreadable(path, other),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(unreadable(path, "empty raster"));
    }
    Ok(Slide {
        meta: SlideMeta::new(w, h, None),
        path: path.to_path_buf(),
        source: Source::Raster(Arc::new(rgb)),
    })
}

fn new_decoder(path: &Path) -> Result<TiffDecoder> {
    let f = File::open(path).map_err(|e| WsiError::Io { path: path.to_path_buf(), source: e })?;
    Decoder::new(BufReader::new(f))
        .map(|d| d.with_limits(Limits::unlimited()))
        .map_err(|e| map_tiff(path, e))
}

fn sample_layout(path: &Path, dec: &mut TiffDecoder) -> Result<SampleLayout> {
    let ct = dec.colortype().map_err(|e| map_tiff(path, e))?;
    let layout = match ct {
        ColorType::RGB(8) => SampleLayout::Rgb,
        ColorType::RGBA(8) => SampleLayout::Rgba,
        ColorType::Gray(8) => SampleLayout::Gray,
        ColorType::GrayA(8) => SampleLayout::GrayA,
        other => return Err(unsupported(path, format!("color type {other:?}"))),
    };
    let planar: Option<u16> =
        dec.find_tag_unsigned(Tag::PlanarConfiguration).map_err(|e| map_tiff(path, e))?;
    if planar.unwrap_or(1) != 1 && layout.samples() > 1 {
        return Err(unsupported(path, "planar sample configuration"));
    }
    Ok(layout)
}

fn open_tiff(path: &Path) -> Result<Slide> {
    let file_len =
        std::fs::metadata(path).map_err(|e| WsiError::Io { path: path.to_path_buf(), source: e })?.len();
    let mut dec = new_decoder(path)?;
    let (width, height) = dec.dimensions().map_err(|e| map_tiff(path, e))?;
    if width == 0 || height == 0 {
        return Err(unreadable(path, "zero image dimension"));
    }
    let layout = sample_layout(path, &mut dec)?;
    let compression: u16 =
        dec.find_tag_unsigned(Tag::Compression).map_err(|e| map_tiff(path, e))?.unwrap_or(1);
    // None, LZW, Adobe deflate, deflate.
    if !matches!(compression, 1 | 5 | 8 | 32946) {
        return Err(unsupported(path, format!("compression scheme {compression}")));
    }
    check_extents(path, &mut dec, file_len)?;
    let mpp = read_mpp(&mut dec);
    let chunk_type = dec.get_chunk_type();
    let (chunk_w, chunk_h) = dec.chunk_dimensions();

    let levels = scan_levels(path, &mut dec, width, height);
    dec.seek_to_image(0).map_err(|e| map_tiff(path, e))?;

    Ok(Slide {
        meta: SlideMeta { width_px: width, height_px: height, levels, mpp },
        path: path.to_path_buf(),
        source: Source::Tiff(TiffSource {
            chunk_type,
            chunk_w,
            chunk_h,
            layout,
            pool: Mutex::new(vec![PooledDecoder { decoder: dec, cached: None }]),
        }),
    })
}

/// Rejects files whose chunk table points past the end of the file.
fn check_extents(path: &Path, dec: &mut TiffDecoder, file_len: u64) -> Result<()> {
    let (off_tag, len_tag) = match dec.get_chunk_type() {
        ChunkType::Tile => (Tag::TileOffsets, Tag::TileByteCounts),
        ChunkType::Strip => (Tag::StripOffsets, Tag::StripByteCounts),
    };
    let offsets: Vec<u64> = dec
        .find_tag_unsigned_vec(off_tag)
        .map_err(|e| map_tiff(path, e))?
        .ok_or_else(|| unreadable(path, "missing chunk offsets"))?;
    let counts: Vec<u64> = dec
        .find_tag_unsigned_vec(len_tag)
        .map_err(|e| map_tiff(path, e))?
        .ok_or_else(|| unreadable(path, "missing chunk byte counts"))?;
    if offsets.len() != counts.len() {
        return Err(unreadable(path, "chunk offset/byte-count tables differ in length"));
    }
    for (o, c) in offsets.iter().zip(&counts) {
        if o.saturating_add(*c) > file_len {
            return Err(unreadable(path, "truncated: chunk extends past end of file"));
        }
    }
    Ok(())
}

fn read_mpp(dec: &mut TiffDecoder) -> Option<Mpp> {
    let rational = |dec: &mut TiffDecoder, tag| -> Option<f64> {
        use tiff::decoder::ifd::Value;
        let v = match dec.find_tag(tag).ok().flatten()? {
            Value::Rational(n, d) if d != 0 => n as f64 / d as f64,
            Value::Float(f) => f as f64,
            Value::Double(f) => f,
            _ => return None,
        };
        (v > 0.0).then_some(v)
    };
    let unit: u16 = dec.find_tag_unsigned(Tag::ResolutionUnit).ok().flatten().unwrap_or(2);
    let microns_per_unit = match unit {
        2 => Some(25_400.0),
        3 => Some(10_000.0),
        _ => None,
    };
    if let (Some(upu), Some(xr), Some(yr)) =
        (microns_per_unit, rational(dec, Tag::XResolution), rational(dec, Tag::YResolution))
    {
        let mpp = Mpp { x: upu / xr, y: upu / yr };
        // 72/300 dpi defaults written by generic tools are not slide scales.
        if mpp.x < 100.0 && mpp.y < 100.0 {
            return Some(mpp);
        }
    }
    // Aperio-style description: "... |MPP = 0.2520|..."
    let desc = dec.get_tag_ascii_string(Tag::ImageDescription).ok()?;
    desc.split('|').find_map(|field| {
        let (k, v) = field.split_once('=')?;
        if k.trim().eq_ignore_ascii_case("mpp") {
            v.trim().parse::<f64>().ok().filter(|m| *m > 0.0).map(|m| Mpp { x: m, y: m })
        } else {
            None
        }
    })
}

/// Collects reduced-resolution IFDs that form a consistent pyramid below level 0.
fn scan_levels(path: &Path, dec: &mut TiffDecoder, width: u32, height: u32) -> Vec<Level> {
    let mut levels = vec![Level { downsample: 1.0, width, height }];
    let mut idx = 1;
    while dec.more_images() {
        if dec.seek_to_image(idx).is_err() {
            break;
        }
        idx += 1;
        let Ok((w, h)) = dec.dimensions() else { break };
        if w == 0 || h == 0 || sample_layout(path, dec).is_err() {
            continue;
        }
        let dx = width as f64 / w as f64;
        let dy = height as f64 / h as f64;
        let prev = levels.last().map(|l| l.downsample).unwrap_or(1.0);
        // Associated images (labels, macros) have a different aspect ratio.
        if (dx - dy).abs() / dx > 0.02 || dx <= prev {
            continue;
        }
        levels.push(Level { downsample: dx, width: w, height: h });
    }
    levels
}

/// Reads one level-0 tile; border tiles are padded with white.
pub fn read_tile(slide: &Slide, coord: TileCoord, tile_size_px: u32) -> Result<Tile> {
    if tile_size_px == 0 {
        return Err(WsiError::InvalidTileSize(0, "must be at least 1"));
    }
    let grid = slide.grid(tile_size_px);
    grid.check(coord)?;
    let rect = grid.tile_rect(coord);
    let mut tile = Tile::blank(coord, tile_size_px, rect.w, rect.h);
    match &slide.source {
        Source::Raster(img) => {
            let row_bytes = rect.w as usize * 3;
            for dy in 0..rect.h {
                let src_start = ((rect.y + dy) as usize * img.width() as usize + rect.x as usize) * 3;
                let dst_start = dy as usize * tile_size_px as usize * 3;
                tile.pixels[dst_start..dst_start + row_bytes]
                    .copy_from_slice(&img.as_raw()[src_start..src_start + row_bytes]);
            }
        }
        Source::Tiff(src) => src.fill(&slide.path, slide.meta.width_px, rect, &mut tile)?,
    }
    Ok(tile)
}

impl TiffSource {
    fn checkout(&self, path: &Path) -> Result<PooledDecoder> {
        let pooled = self.pool.lock().unwrap_or_else(|p| p.into_inner()).pop();
        match pooled {
            Some(p) => Ok(p),
            None => Ok(PooledDecoder { decoder: new_decoder(path)?, cached: None }),
        }
    }

    fn checkin(&self, p: PooledDecoder) {
        self.pool.lock().unwrap_or_else(|p| p.into_inner()).push(p);
    }

    fn fill(&self, path: &Path, image_w: u32, rect: super::PixelRect, tile: &mut Tile) -> Result<()> {
        let mut pd = self.checkout(path)?;
        let r = self.fill_with(&mut pd, path, image_w, rect, tile);
        if r.is_ok() {
            self.checkin(pd);
        }
        r
    }

    fn fill_with(
        &self,
        pd: &mut PooledDecoder,
        path: &Path,
        image_w: u32,
        rect: super::PixelRect,
        tile: &mut Tile,
    ) -> Result<()> {
        let (cw, ch) = match self.chunk_type {
            ChunkType::Tile => (self.chunk_w, self.chunk_h),
            ChunkType::Strip => (image_w, self.chunk_h),
        };
        let across = image_w.div_ceil(cw);
        let spp = self.layout.samples();
        let cx0 = rect.x / cw;
        let cx1 = (rect.x + rect.w - 1) / cw;
        let cy0 = rect.y / ch;
        let cy1 = (rect.y + rect.h - 1) / ch;
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let index = cy * across + cx;
                let data_w = pd.decoder.chunk_data_dimensions(index).0;
                if pd.cached.as_ref().map(|c| c.0) != Some(index) {
                    let data = match pd.decoder.read_chunk(index).map_err(|e| map_tiff(path, e))? {
                        DecodingResult::U8(v) => v,
                        _ => return Err(unsupported(path, "non 8-bit samples")),
                    };
                    pd.cached = Some((index, data));
                }
                let data = &pd.cached.as_ref().expect("chunk cached").1;
                let chunk_x = cx * cw;
                let chunk_y = cy * ch;
                let x0 = rect.x.max(chunk_x);
                let x1 = (rect.x + rect.w).min(chunk_x + cw);
                let y0 = rect.y.max(chunk_y);
                let y1 = (rect.y + rect.h).min(chunk_y + ch);
                for y in y0..y1 {
                    let src_row = (y - chunk_y) as usize * data_w as usize;
                    for x in x0..x1 {
                        let s = (src_row + (x - chunk_x) as usize) * spp;
                        let px = match self.layout {
                            SampleLayout::Rgb | SampleLayout::Rgba => {
                                [data[s], data[s + 1], data[s + 2]]
                            }
                            SampleLayout::Gray | SampleLayout::GrayA => [data[s]; 3],
                        };
                        tile.set_pixel(x - rect.x, y - rect.y, px);
                    }
                }
            }
        }
        Ok(())
    }
}
