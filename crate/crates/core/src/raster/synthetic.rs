use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GeoTransform, RasterTile};
use crate::error::{Error, Result};
use crate::seed;

/// Land-cover archetypes, named after the EuroSAT classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandCover {
    AnnualCrop,
    Forest,
    HerbaceousVegetation,
    Highway,
    Industrial,
    Pasture,
    PermanentCrop,
    Residential,
    River,
    SeaLake,
}

/// Colour/texture signature rendered for one land cover.
#[derive(Debug, Clone, Copy)]
pub struct Texture {
    pub palette: &'static [[u8; 3]],
    /// Side of the square blocks that share a palette colour.
    pub block: usize,
    /// Per-pixel uniform jitter, +/- this many levels per channel.
    pub jitter: u8,
}

impl LandCover {
    pub const ALL: [LandCover; 10] = [
        LandCover::AnnualCrop,
        LandCover::Forest,
        LandCover::HerbaceousVegetation,
        LandCover::Highway,
        LandCover::Industrial,
        LandCover::Pasture,
        LandCover::PermanentCrop,
        LandCover::Residential,
        LandCover::River,
        LandCover::SeaLake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LandCover::AnnualCrop => "annual_crop",
            LandCover::Forest => "forest",
            LandCover::HerbaceousVegetation => "herbaceous_vegetation",
            LandCover::Highway => "highway",
            LandCover::Industrial => "industrial",
            LandCover::Pasture => "pasture",
            LandCover::PermanentCrop => "permanent_crop",
            LandCover::Residential => "residential",
            LandCover::River => "river",
            LandCover::SeaLake => "sea_lake",
        }
    }

    pub fn texture(self) -> Texture {
        let (palette, block): (&'static [[u8; 3]], usize) = match self {
            LandCover::AnnualCrop => (&[[170, 160, 110], [150, 140, 95], [190, 175, 130], [120, 130, 80]], 6),
            LandCover::Forest => (&[[30, 62, 32], [24, 60, 28], [42, 95, 48], [44, 83, 44]], 2),
            LandCover::HerbaceousVegetation => (&[[110, 130, 70], [95, 120, 60], [130, 140, 85], [120, 125, 75]], 3),
            LandCover::Highway => (&[[90, 90, 95], [110, 110, 112], [140, 150, 110], [80, 82, 85]], 4),
            LandCover::Industrial => (&[[120, 135, 200], [140, 150, 205], [105, 125, 180], [135, 150, 195]], 8),
            LandCover::Pasture => (&[[120, 160, 80], [135, 170, 90], [110, 150, 75], [125, 155, 85]], 5),
            LandCover::PermanentCrop => (&[[140, 130, 80], [100, 120, 60], [150, 140, 90], [90, 110, 55]], 3),
            LandCover::Residential => (&[[220, 95, 70], [200, 120, 95], [160, 115, 100], [180, 90, 75]], 3),
            LandCover::River => (&[[40, 70, 110], [50, 80, 120], [35, 60, 95], [80, 100, 90]], 4),
            LandCover::SeaLake => (&[[20, 40, 80], [25, 45, 90], [18, 36, 72], [22, 42, 85]], 8),
        };
        Texture { palette, block, jitter: 6 }
    }
}

impl fmt::Display for LandCover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LandCover {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        LandCover::ALL
            .into_iter()
            .find(|lc| lc.name().replace('_', "") == key)
            .ok_or_else(|| Error::Validation(format!("unknown land cover {s:?}")))
    }
}

/// Rectangular region in pixel space, `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
    pub cover: LandCover,
}

/// Land-cover layout of a synthetic tile. Regions must tile the raster
/// exactly: no gaps and no overlaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub geo_transform: GeoTransform,
    pub resolution_m: f64,
    pub season_tag: String,
    pub regions: Vec<Region>,
}

impl Layout {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::LayoutValidation("layout has no regions".into()));
        }
        let mut hits = vec![0u8; self.width * self.height];
        for (i, r) in self.regions.iter().enumerate() {
            if r.row0 >= r.row1 || r.col0 >= r.col1 || r.row1 > self.height || r.col1 > self.width {
                return Err(Error::LayoutValidation(format!("region {i} is empty or out of bounds")));
            }
            for row in r.row0..r.row1 {
                for h in &mut hits[row * self.width + r.col0..row * self.width + r.col1] {
                    *h = h.saturating_add(1);
                }
            }
        }
        if let Some(p) = hits.iter().position(|&h| h > 1) {
            return Err(Error::LayoutValidation(format!(
                "regions overlap at pixel ({}, {})",
                p / self.width,
                p % self.width
            )));
        }
        if let Some(p) = hits.iter().position(|&h| h == 0) {
            return Err(Error::LayoutValidation(format!(
                "pixel ({}, {}) is not covered by any region",
                p / self.width,
                p % self.width
            )));
        }
        Ok(())
    }

    /// Land cover at a pixel, if inside the raster.
    pub fn cover_at(&self, row: usize, col: usize) -> Option<LandCover> {
        self.regions
            .iter()
            .find(|r| (r.row0..r.row1).contains(&row) && (r.col0..r.col1).contains(&col))
            .map(|r| r.cover)
    }
}

/// Renders a deterministic raster for `layout`: identical `(layout, seed)`
/// gives byte-identical pixels.
pub fn make_synthetic_tile(layout: &Layout, seed: u64) -> Result<RasterTile> {
    layout.validate()?;
    let w = layout.width;
    let mut pixels = vec![0u8; w * layout.height * 3];
    for (idx, region) in layout.regions.iter().enumerate() {
        let tex = region.cover.texture();
        let mut rng = seed::rng(seed::derive_index(seed, "region", idx));
        let jitter = i16::from(tex.jitter);
        for br in (region.row0..region.row1).step_by(tex.block) {
            for bc in (region.col0..region.col1).step_by(tex.block) {
                let base = tex.palette[rng.random_range(0..tex.palette.len())];
                for row in br..(br + tex.block).min(region.row1) {
                    for col in bc..(bc + tex.block).min(region.col1) {
                        let i = (row * w + col) * 3;
                        for ch in 0..3 {
                            let v = i16::from(base[ch]) + rng.random_range(-jitter..=jitter);
                            pixels[i + ch] = v.clamp(0, 255) as u8;
                        }
                    }
                }
            }
        }
    }
    RasterTile::new(
        w,
        layout.height,
        pixels,
        layout.geo_transform,
        layout.resolution_m,
        layout.season_tag.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LatLon;

    fn layout(regions: Vec<Region>, width: usize, height: usize) -> Layout {
        Layout {
            width,
            height,
            geo_transform: GeoTransform::north_up(LatLon::new(45.0, 7.0), 1e-4, 1e-4),
            resolution_m: 10.0,
            season_tag: "spring".into(),
            regions,
        }
    }

    fn strip(col0: usize, col1: usize, cover: LandCover) -> Region {
        Region { row0: 0, row1: 40, col0, col1, cover }
    }

    fn palette_mean(cover: LandCover) -> [f64; 3] {
        let tex = cover.texture();
        let mut m = [0.0; 3];
        for c in tex.palette {
            for ch in 0..3 {
                m[ch] += f64::from(c[ch]) / tex.palette.len() as f64;
            }
        }
        m
    }

    #[test]
    fn deterministic_per_seed() {
        let l = layout(vec![strip(0, 30, LandCover::Forest), strip(30, 60, LandCover::Residential)], 60, 40);
        let a = make_synthetic_tile(&l, 7).unwrap();
        let b = make_synthetic_tile(&l, 7).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        let c = make_synthetic_tile(&l, 8).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn forest_pixels_come_from_forest_palette() {
        let tex = LandCover::Forest.texture();
        let tile = make_synthetic_tile(&layout(vec![strip(0, 50, LandCover::Forest)], 50, 40), 3).unwrap();
        for px in tile.pixels().chunks(3) {
            let ok = tex.palette.iter().any(|c| {
                (0..3).all(|ch| (i16::from(px[ch]) - i16::from(c[ch])).abs() <= i16::from(tex.jitter))
            });
            assert!(ok, "pixel {px:?} is not a jittered forest colour");
        }
    }

    #[test]
    fn three_regions_have_separated_means() {
        let covers = [LandCover::Residential, LandCover::Forest, LandCover::Industrial];
        // expected means straight from the texture tables
        let table: Vec<[f64; 3]> = covers.iter().map(|c| palette_mean(*c)).collect();
        assert_eq!(table[0], [190.0, 105.0, 85.0]);
        assert_eq!(table[1], [35.0, 75.0, 38.0]);
        assert_eq!(table[2], [125.0, 140.0, 195.0]);

        let regions = vec![strip(0, 80, covers[0]), strip(80, 160, covers[1]), strip(160, 240, covers[2])];
        let tile = make_synthetic_tile(&layout(regions, 240, 40), 11).unwrap();
        let mut observed = [[0.0f64; 3]; 3];
        for (k, obs) in observed.iter_mut().enumerate() {
            let mut n = 0.0;
            for row in 0..40 {
                for col in k * 80..(k + 1) * 80 {
                    let p = tile.pixel(row, col);
                    for ch in 0..3 {
                        obs[ch] += f64::from(p[ch]);
                    }
                    n += 1.0;
                }
            }
            obs.iter_mut().for_each(|v| *v /= n);
        }
        for a in 0..3 {
            for ch in 0..3 {
                assert!((observed[a][ch] - table[a][ch]).abs() < 12.0, "{observed:?} vs {table:?}");
            }
            for b in a + 1..3 {
                let sep = (0..3).map(|ch| (observed[a][ch] - observed[b][ch]).abs()).fold(0.0, f64::max);
                assert!(sep >= 40.0, "regions {a} and {b} separated by only {sep}");
            }
        }
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        let gap = layout(vec![strip(0, 20, LandCover::Forest), strip(25, 50, LandCover::River)], 50, 40);
        assert!(matches!(make_synthetic_tile(&gap, 1), Err(Error::LayoutValidation(m)) if m.contains("not covered")));
        let overlap = layout(vec![strip(0, 30, LandCover::Forest), strip(25, 50, LandCover::River)], 50, 40);
        assert!(matches!(make_synthetic_tile(&overlap, 1), Err(Error::LayoutValidation(m)) if m.contains("overlap")));
    }

    #[test]
    fn parses_eurosat_class_names() {
        assert_eq!("SeaLake".parse::<LandCover>().unwrap(), LandCover::SeaLake);
        assert_eq!("herbaceous_vegetation".parse::<LandCover>().unwrap(), LandCover::HerbaceousVegetation);
        assert!("Desert".parse::<LandCover>().is_err());
    }
}
