use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, LabeledTile, Split};
use crate::annotation::{CoverageVector, GleasonClass};
use crate::exec::{self, Execution};
use crate::wsi_io::{Tile, TileCoord};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TILE_DIR: &str = "tiles";

/// One manifest line. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub col: u32,
    pub row: u32,
    pub label: String,
    pub split: String,
    pub cov_regular: f64,
    pub cov_g3: f64,
    pub cov_g4: f64,
    pub cov_g5: f64,
    pub cov_art_empty: f64,
    pub cov_art_sponge: f64,
    pub path: String,
}

impl ManifestRow {
    pub fn from_tile(t: &LabeledTile, path: String) -> Self {
        let c = |g| t.coverage.get(g);
        Self {
            slide_id: t.slide_id.clone(),
            col: t.coord.col,
            row: t.coord.row,
            label: t.label.map(|l| l.name().to_string()).unwrap_or_else(|| "Unlabeled".into()),
            split: t.split.as_str().into(),
            cov_regular: c(GleasonClass::Regular),
            cov_g3: c(GleasonClass::Gleason3),
            cov_g4: c(GleasonClass::Gleason4),
            cov_g5: c(GleasonClass::Gleason5),
            cov_art_empty: c(GleasonClass::ArtefactEmpty),
            cov_art_sponge: c(GleasonClass::ArtefactSponge),
            path,
        }
    }

    pub fn coord(&self) -> TileCoord {
        TileCoord::new(self.col, self.row)
    }

    pub fn class(&self) -> Option<GleasonClass> {
        GleasonClass::from_name(&self.label)
    }

    pub fn to_tile(&self) -> LabeledTile {
        let coverage = CoverageVector::from_pairs(&[
            (GleasonClass::Regular, self.cov_regular),
            (GleasonClass::Gleason3, self.cov_g3),
            (GleasonClass::Gleason4, self.cov_g4),
            (GleasonClass::Gleason5, self.cov_g5),
            (GleasonClass::ArtefactEmpty, self.cov_art_empty),
            (GleasonClass::ArtefactSponge, self.cov_art_sponge),
        ]);
        LabeledTile {
            slide_id: self.slide_id.clone(),
            coord: self.coord(),
            label: self.class(),
            coverage,
            split: Split::parse(&self.split).unwrap_or_default(),
        }
    }
}

pub fn tile_file_name(t: &LabeledTile) -> String {
    format!("{}_{}_{}.png", t.slide_id, t.coord.col, t.coord.row)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

fn save_png(tile: &Tile, path: &Path) -> Result<(), DatasetError> {
    let img = image::RgbImage::from_raw(tile.tile_size, tile.tile_size, tile.pixels.clone())
        .ok_or(crate::wsi_io::WsiError::BadTileBuffer {
            col: tile.coord.col,
            row: tile.coord.row,
            tile_size: tile.tile_size,
        })?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Image { path: path.display().to_string(), source })
}

/// Writes one PNG per tile under `out_dir/tiles/` plus `out_dir/manifest.csv`.
///
/// `fetch` produces the pixels of a tile; it runs concurrently under
/// `Execution::Parallel`. Manifest rows follow the order of `tiles`.
pub fn write_manifest<F>(
    tiles: &[LabeledTile],
    out_dir: &Path,
    exec: Execution,
    fetch: F,
) -> Result<PathBuf, DatasetError>
where
    F: Fn(&LabeledTile) -> Result<Tile, DatasetError> + Sync + Send,
{
    let tile_dir = out_dir.join(TILE_DIR);
    fs::create_dir_all(&tile_dir).map_err(io_err(&tile_dir))?;
    let paths = exec::try_map(exec, tiles, |t| {
        let name = tile_file_name(t);
        save_png(&fetch(t)?, &tile_dir.join(&name))?;
        Ok::<_, DatasetError>(format!("{TILE_DIR}/{name}"))
    })?;

    let manifest = out_dir.join(MANIFEST_FILE);
    let csv_err = |source| DatasetError::Csv { path: manifest.display().to_string(), source };
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    for (t, p) in tiles.iter().zip(paths) {
        w.serialize(ManifestRow::from_tile(t, p)).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetError> {
    let csv_err = |source| DatasetError::Csv { path: path.display().to_string(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows = r.deserialize().collect::<Result<Vec<ManifestRow>, _>>().map_err(csv_err)?;
    for row in &rows {
        if row.label != "Unlabeled" && row.class().is_none() {
            return Err(DatasetError::BadRow {
                path: path.display().to_string(),
                reason: format!("unknown label {:?}", row.label),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = LabeledTile::new(
            "slide_a",
            TileCoord::new(2, 1),
            CoverageVector::from_pairs(&[(GleasonClass::Gleason4, 0.625), (GleasonClass::Regular, 0.1)]),
        );
        t.split = Split::Val;
        let tiles = vec![t.clone()];
        let manifest = write_manifest(&tiles, dir.path(), Execution::Sequential, |t| {
            Ok(Tile::blank(t.coord, 16, 16, 16))
        })
        .unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        assert!(text.starts_with(
            "slide_id,col,row,label,split,cov_regular,cov_g3,cov_g4,cov_g5,cov_art_empty,cov_art_sponge,path\n"
        ));
        assert!(text.contains("slide_a,2,1,Gleason 4,val,0.1,0.0,0.625,0.0,0.0,0.0,tiles/slide_a_2_1.png"));
        assert!(dir.path().join("tiles/slide_a_2_1.png").exists());
        let rows = read_manifest(&manifest).unwrap();
        assert_eq!(rows[0].to_tile(), t);
    }
}
