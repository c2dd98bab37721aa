//! Local raster store: a directory of PNG tiles plus a JSON manifest.
//!
//! Scenes exported from a satellite archive (RGB composite plus an ESRI world
//! file, or explicit geotransform coefficients) are added with
//! [`RasterStore::import`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{extract_bbox, GeoTransform, ImagePatch, RasterTile, MIN_COVERAGE};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CoverageBox};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    /// Relative to the store directory.
    pub path: String,
    pub geo_transform: GeoTransform,
    pub resolution_m: f64,
    pub season_tag: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    tiles: Vec<TileRecord>,
}

#[derive(Debug, Clone)]
pub struct RasterStore {
    dir: PathBuf,
    records: Vec<TileRecord>,
    tiles: Vec<RasterTile>,
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn load_png(path: &Path, record: &TileRecord) -> Result<RasterTile> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    RasterTile::new(
        w,
        h,
        img.into_raw(),
        record.geo_transform,
        record.resolution_m,
        record.season_tag.clone(),
    )
}

fn save_png(path: &Path, tile: &RasterTile) -> Result<()> {
    let img = image::RgbImage::from_raw(tile.width() as u32, tile.height() as u32, tile.pixels().to_vec())
        .ok_or_else(|| Error::Shape("tile buffer does not match its dimensions".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Parses an ESRI world file (six lines: A, D, B, E, C, F, where C/F locate
/// the centre of the top-left pixel) into corner-based GDAL coefficients.
pub fn read_world_file(path: &Path) -> Result<GeoTransform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Validation(format!("bad world file value {t:?}"))))
        .collect::<Result<_>>()?;
    let [a, d, b, e, c, f] = v[..] else {
        return Err(Error::Validation(format!(
            "world file {} must hold 6 numbers, found {}",
            path.display(),
            v.len()
        )));
    };
    Ok(GeoTransform([c - 0.5 * a - 0.5 * b, a, b, f - 0.5 * d - 0.5 * e, d, e]))
}

impl RasterStore {
    /// Loads every tile listed in the manifest. All tiles must share one season tag.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?;
        let mut tiles = Vec::with_capacity(manifest.tiles.len());
        for record in &manifest.tiles {
            if let Some(first) = manifest.tiles.first() {
                if record.season_tag != first.season_tag {
                    return Err(Error::SeasonMismatch {
                        expected: first.season_tag.clone(),
                        found: record.season_tag.clone(),
                        tile: record.path.clone(),
                    });
                }
            }
            tiles.push(load_png(&dir.join(&record.path), record)?);
        }
        Ok(Self { dir, records: manifest.tiles, tiles })
    }

    /// Writes `tiles` as a fresh store in `dir`.
    pub fn create(dir: impl AsRef<Path>, tiles: &[RasterTile]) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for (i, tile) in tiles.iter().enumerate() {
            let name = format!("tile_{i:03}.png");
            save_png(&dir.join(&name), tile)?;
            manifest.tiles.push(TileRecord {
                path: name,
                geo_transform: tile.geo_transform,
                resolution_m: tile.resolution_m,
                season_tag: tile.season_tag.clone(),
            });
        }
        write_manifest(dir, &manifest)?;
        Self::open(dir)
    }

    /// Copies an exported RGB scene into the store and appends it to the
    /// manifest. The store directory and manifest are created if missing.
    pub fn import(
        dir: impl AsRef<Path>,
        image_path: &Path,
        geo_transform: GeoTransform,
        resolution_m: f64,
        season_tag: &str,
    ) -> Result<TileRecord> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = if dir.join(MANIFEST_FILE).exists() {
            read_manifest(dir)?
        } else {
            Manifest::default()
        };
        if let Some(first) = manifest.tiles.first() {
            if first.season_tag != season_tag {
                return Err(Error::SeasonMismatch {
                    expected: first.season_tag.clone(),
                    found: season_tag.to_string(),
                    tile: image_path.display().to_string(),
                });
            }
        }
        let name = format!("tile_{:03}.png", manifest.tiles.len());
        let record = TileRecord {
            path: name.clone(),
            geo_transform,
            resolution_m,
            season_tag: season_tag.to_string(),
        };
        // validate before anything is written
        let tile = load_png(image_path, &record)?;
        save_png(&dir.join(&name), &tile)?;
        manifest.tiles.push(record.clone());
        write_manifest(dir, &manifest)?;
        Ok(record)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn tiles(&self) -> &[RasterTile] {
        &self.tiles
    }

    pub fn records(&self) -> &[TileRecord] {
        &self.records
    }

    pub fn season_tag(&self) -> Option<&str> {
        self.records.first().map(|r| r.season_tag.as_str())
    }

    /// Union of all tile extents.
    pub fn extent(&self) -> Option<BoundingBox> {
        let mut it = self.tiles.iter().map(RasterTile::extent);
        let first = it.next()?;
        Some(it.fold(first, |a, b| BoundingBox {
            lat_min: a.lat_min.min(b.lat_min),
            lat_max: a.lat_max.max(b.lat_max),
            lon_min: a.lon_min.min(b.lon_min),
            lon_max: a.lon_max.max(b.lon_max),
        }))
    }

    /// Extracts the patch for `coverage` from the tile covering most of its bbox.
    pub fn extract(&self, coverage: &CoverageBox, cell_id: &str) -> Result<ImagePatch> {
        let best = self
            .tiles
            .iter()
            .map(|t| (t.coverage_fraction(&coverage.bbox), t))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            None => Err(Error::OutOfExtent),
            Some((f, _)) if f <= 0.0 => Err(Error::OutOfExtent),
            Some((f, _)) if f < MIN_COVERAGE => Err(Error::InsufficientCoverage { missing_fraction: 1.0 - f }),
            Some((_, tile)) => extract_bbox(tile, &coverage.bbox, cell_id),
        }
    }
}
