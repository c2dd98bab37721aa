//! Georeferenced RGB rasters and fixed-size patch extraction.

mod store;
mod synthetic;

pub use store::{read_world_file, RasterStore, TileRecord, MANIFEST_FILE};
pub use synthetic::{make_synthetic_tile, LandCover, Layout, Region, Texture};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CoverageBox, LatLon};
use crate::PATCH_SIZE;

/// Minimum fraction of a bounding box that must fall on the raster.
pub const MIN_COVERAGE: f64 = 0.99;

/// Affine map from pixel space to geographic space, in GDAL coefficient order:
/// `lon = c0 + col*c1 + row*c2`, `lat = c3 + col*c4 + row*c5`.
/// Pixel `(row, col)` covers `[row, row+1) x [col, col+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    /// North-up transform with the top-left corner at `origin`.
    pub fn north_up(origin: LatLon, deg_per_px_lat: f64, deg_per_px_lon: f64) -> Self {
        GeoTransform([origin.lon, deg_per_px_lon, 0.0, origin.lat, 0.0, -deg_per_px_lat])
    }

    fn det(&self) -> f64 {
        let c = &self.0;
        c[1] * c[5] - c[2] * c[4]
    }

    pub fn is_invertible(&self) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.det().abs() > f64::EPSILON * 1e-12
    }

    pub fn to_geo(&self, row: f64, col: f64) -> LatLon {
        let c = &self.0;
        LatLon::new(c[3] + col * c[4] + row * c[5], c[0] + col * c[1] + row * c[2])
    }

    /// Continuous pixel coordinates `(row, col)` of a geographic point.
    pub fn to_pixel(&self, p: LatLon) -> (f64, f64) {
        let c = &self.0;
        let (dx, dy) = (p.lon - c[0], p.lat - c[3]);
        let det = self.det();
        let col = (c[5] * dx - c[2] * dy) / det;
        let row = (c[1] * dy - c[4] * dx) / det;
        (row, col)
    }
}

/// An RGB raster with its georeferencing.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    width: usize,
    height: usize,
    /// Row-major RGB, `height * width * 3` bytes.
    pixels: Vec<u8>,
    pub geo_transform: GeoTransform,
    pub resolution_m: f64,
    pub season_tag: String,
}

impl RasterTile {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        geo_transform: GeoTransform,
        resolution_m: f64,
        season_tag: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("raster must be at least 1x1".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "raster of {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if !geo_transform.is_invertible() {
            return Err(Error::Validation("geo_transform is not invertible".into()));
        }
        if !(resolution_m.is_finite() && resolution_m > 0.0) {
            return Err(Error::Validation(format!("resolution_m must be > 0, got {resolution_m}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            geo_transform,
            resolution_m,
            season_tag: season_tag.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Bounding box of the raster footprint.
    pub fn extent(&self) -> BoundingBox {
        let (h, w) = (self.height as f64, self.width as f64);
        let gt = &self.geo_transform;
        let corners = [gt.to_geo(0.0, 0.0), gt.to_geo(0.0, w), gt.to_geo(h, w), gt.to_geo(h, 0.0)];
        BoundingBox::from_points(&corners)
    }

    /// Fraction of `bbox` (by area) that lies on the raster.
    pub fn coverage_fraction(&self, bbox: &BoundingBox) -> f64 {
        let gt = &self.geo_transform;
        let ring: Vec<(f64, f64)> = [
            LatLon::new(bbox.lat_max, bbox.lon_min),
            LatLon::new(bbox.lat_max, bbox.lon_max),
            LatLon::new(bbox.lat_min, bbox.lon_max),
            LatLon::new(bbox.lat_min, bbox.lon_min),
        ]
        .iter()
        .map(|p| {
            let (r, c) = gt.to_pixel(*p);
            (c, r)
        })
        .collect();
        let total = polygon_area(&ring);
        if total <= 0.0 {
            return 0.0;
        }
        let clipped = clip_to_rect(&ring, self.width as f64, self.height as f64);
        (polygon_area(&clipped) / total).clamp(0.0, 1.0)
    }

    /// Bilinear sample at continuous pixel coordinates, indexing pixel centres.
    fn sample_bilinear(&self, row: f64, col: f64) -> [f64; 3] {
        let y = (row - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x = (col - 0.5).clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = f64::from(p00[ch]) * (1.0 - fx) + f64::from(p01[ch]) * fx;
            let bottom = f64::from(p10[ch]) * (1.0 - fx) + f64::from(p11[ch]) * fx;
            out[ch] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

/// A `PATCH_SIZE x PATCH_SIZE` RGB crop tied to the cell it was cut for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePatch {
    pixels: Vec<u8>,
    pub source_cell_id: String,
    pub source_bbox: BoundingBox,
    pub resampling: String,
}

impl ImagePatch {
    pub fn new(pixels: Vec<u8>, source_cell_id: impl Into<String>, source_bbox: BoundingBox) -> Result<Self> {
        if pixels.len() != PATCH_SIZE * PATCH_SIZE * 3 {
            return Err(Error::Shape(format!(
                "patch needs {} bytes, got {}",
                PATCH_SIZE * PATCH_SIZE * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            source_cell_id: source_cell_id.into(),
            source_bbox,
            resampling: "bilinear".into(),
        })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * PATCH_SIZE + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(PATCH_SIZE as u32, PATCH_SIZE as u32, self.pixels.clone())
            .expect("patch buffer has the exact RGB size")
    }
}

/// Crops the axis-aligned bbox of `coverage` from `tile` and resamples it to
/// `PATCH_SIZE x PATCH_SIZE` with bilinear interpolation.
pub fn extract_patch(tile: &RasterTile, coverage: &CoverageBox, cell_id: &str) -> Result<ImagePatch> {
    extract_bbox(tile, &coverage.bbox, cell_id)
}

pub fn extract_bbox(tile: &RasterTile, bbox: &BoundingBox, cell_id: &str) -> Result<ImagePatch> {
    if !(bbox.height_deg() > 0.0 && bbox.width_deg() > 0.0) {
        return Err(Error::DegenerateGeometry(format!("bbox for {cell_id} has zero area")));
    }
    let coverage = tile.coverage_fraction(bbox);
    if coverage <= 0.0 {
        return Err(Error::OutOfExtent);
    }
    if coverage < MIN_COVERAGE {
        return Err(Error::InsufficientCoverage { missing_fraction: 1.0 - coverage });
    }
    let n = PATCH_SIZE as f64;
    let mut pixels = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * 3);
    for i in 0..PATCH_SIZE {
        let lat = bbox.lat_max - (i as f64 + 0.5) / n * bbox.height_deg();
        for j in 0..PATCH_SIZE {
            let lon = bbox.lon_min + (j as f64 + 0.5) / n * bbox.width_deg();
            let (row, col) = tile.geo_transform.to_pixel(LatLon::new(lat, lon));
            let rgb = tile.sample_bilinear(row, col);
            pixels.extend(rgb.iter().map(|v| (v + 0.5).floor().clamp(0.0, 255.0) as u8));
        }
    }
    ImagePatch::new(pixels, cell_id, *bbox)
}

fn polygon_area(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex ring against `[0, w] x [0, h]`.
fn clip_to_rect(ring: &[(f64, f64)], w: f64, h: f64) -> Vec<(f64, f64)> {
    type Edge = (fn(&(f64, f64), f64) -> bool, usize, f64);
    let edges: [Edge; 4] = [
        (|p, v| p.0 >= v, 0, 0.0),
        (|p, v| p.0 <= v, 0, w),
        (|p, v| p.1 >= v, 1, 0.0),
        (|p, v| p.1 <= v, 1, h),
    ];
    let mut out = ring.to_vec();
    for (inside, axis, value) in edges {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (inside(&cur, value), inside(&prev, value));
            if cur_in != prev_in {
                let (pa, ca) = if axis == 0 { (prev.0, cur.0) } else { (prev.1, cur.1) };
                let t = (value - pa) / (ca - pa);
                out.push((prev.0 + t * (cur.0 - prev.0), prev.1 + t * (cur.1 - prev.1)));
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const STEP: f64 = 1.0 / 1024.0;

    fn gt() -> GeoTransform {
        GeoTransform::north_up(LatLon::new(50.0, 10.0), STEP, STEP)
    }

    fn constant_tile(w: usize, h: usize, rgb: [u8; 3]) -> RasterTile {
        let pixels = (0..w * h).flat_map(|_| rgb).collect();
        RasterTile::new(w, h, pixels, gt(), 10.0, "spring").unwrap()
    }

    /// bbox covering pixel rows [r0, r1) and columns [c0, c1)
    fn pixel_bbox(r0: f64, r1: f64, c0: f64, c1: f64) -> BoundingBox {
        BoundingBox {
            lat_min: 50.0 - r1 * STEP,
            lat_max: 50.0 - r0 * STEP,
            lon_min: 10.0 + c0 * STEP,
            lon_max: 10.0 + c1 * STEP,
        }
    }

    fn checkerboard(w: usize, h: usize) -> RasterTile {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            for c in 0..w {
                let white = ((r / 2) + (c / 2)) % 2 == 0;
                pixels.extend(if white { [250, 240, 230] } else { [10, 20, 30] });
            }
        }
        RasterTile::new(w, h, pixels, gt(), 10.0, "spring").unwrap()
    }

    #[test]
    fn geo_transform_round_trip() {
        let t = GeoTransform([10.0, 0.001, 0.0002, 50.0, -0.0001, -0.001]);
        let (r, c) = t.to_pixel(t.to_geo(12.25, 40.5));
        assert!((r - 12.25).abs() < 1e-9 && (c - 40.5).abs() < 1e-9);
        assert!(!GeoTransform([0.0, 1.0, 2.0, 0.0, 2.0, 4.0]).is_invertible());
    }

    #[test]
    fn constant_tile_gives_constant_patch() {
        let tile = constant_tile(100, 80, [120, 130, 140]);
        let patch = extract_bbox(&tile, &pixel_bbox(3.3, 41.7, 10.1, 77.9), "c1").unwrap();
        assert!(patch.pixels().chunks(3).all(|p| p == [120, 130, 140]));
        assert_eq!(patch.source_cell_id, "c1");
        assert_eq!(patch.resampling, "bilinear");
    }

    #[test]
    fn checkerboard_identity_mapping_matches_hand_table() {
        // 64x64-pixel bbox starting at pixel (8, 16): patch pixel (i, j) sits
        // exactly on source pixel (8 + i, 16 + j). Block parity
        // ((8+i)/2 + (16+j)/2) % 2 == 0 means the light colour.
        let tile = checkerboard(128, 128);
        let patch = extract_bbox(&tile, &pixel_bbox(8.0, 72.0, 16.0, 80.0), "c").unwrap();
        const L: [u8; 3] = [250, 240, 230];
        const D: [u8; 3] = [10, 20, 30];
        let table: [((usize, usize), [u8; 3]); 16] = [
            ((0, 0), L),
            ((0, 1), L),
            ((0, 2), D),
            ((0, 3), D),
            ((1, 0), L),
            ((2, 0), D),
            ((2, 2), L),
            ((3, 5), D),
            ((5, 3), D),
            ((5, 5), L),
            ((10, 7), L),
            ((17, 17), L),
            ((30, 33), D),
            ((41, 62), D),
            ((62, 1), D),
            ((63, 63), L),
        ];
        for ((i, j), want) in table {
            assert_eq!(patch.pixel(i, j), want, "pixel ({i}, {j})");
        }
    }

    #[test]
    fn checkerboard_two_to_one_downsample_keeps_blocks() {
        // 128x128-pixel bbox from (0, 0): each output pixel samples between
        // source pixels 2i and 2i+1, which share a block, so values are exact.
        let tile = checkerboard(128, 128);
        let patch = extract_bbox(&tile, &pixel_bbox(0.0, 128.0, 0.0, 128.0), "c").unwrap();
        for i in 0..PATCH_SIZE {
            for j in 0..PATCH_SIZE {
                let want = if (i + j) % 2 == 0 { [250, 240, 230] } else { [10, 20, 30] };
                assert_eq!(patch.pixel(i, j), want);
            }
        }
    }

    #[test]
    fn out_of_extent_and_partial_coverage() {
        let tile = constant_tile(100, 100, [1, 2, 3]);
        let west = pixel_bbox(10.0, 20.0, -40.0, -20.0);
        assert!(matches!(extract_bbox(&tile, &west, "c"), Err(Error::OutOfExtent)));
        let half = pixel_bbox(10.0, 20.0, 90.0, 110.0);
        match extract_bbox(&tile, &half, "c") {
            Err(Error::InsufficientCoverage { missing_fraction }) => {
                assert!((missing_fraction - 0.5).abs() < 1e-9)
            }
            other => panic!("expected insufficient coverage, got {other:?}"),
        }
        // 0.5% off the edge is tolerated
        let nearly = pixel_bbox(10.0, 20.0, 80.1, 100.1);
        assert!(extract_bbox(&tile, &nearly, "c").is_ok());
    }

    #[test]
    fn resampling_stays_within_source_range() {
        let tile = checkerboard(64, 64);
        let patch = extract_bbox(&tile, &pixel_bbox(1.3, 30.9, 2.7, 41.1), "c").unwrap();
        for p in patch.pixels().chunks(3) {
            assert!((10..=250).contains(&p[0]));
            assert!((20..=240).contains(&p[1]));
            assert!((30..=230).contains(&p[2]));
        }
    }

    #[test]
    fn rejects_bad_tiles() {
        assert!(RasterTile::new(0, 1, vec![], gt(), 10.0, "s").is_err());
        assert!(RasterTile::new(1, 1, vec![0; 2], gt(), 10.0, "s").is_err());
        assert!(RasterTile::new(1, 1, vec![0; 3], gt(), 0.0, "s").is_err());
        let singular = GeoTransform([0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!(RasterTile::new(1, 1, vec![0; 3], singular, 10.0, "s").is_err());
    }
}
