//! Cell coverage geometry on a spherical Earth.
//!
//! A cell's service sector is approximated by a rectangle anchored at the
//! site: its near edge is centred on the antenna, it extends `range_m` along
//! the azimuth, and its width is `width_ratio * range_m`. Antenna tilt is
//! carried through but does not change the footprint.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for all destination-point computations.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Sites closer than this to a pole are rejected.
pub const MAX_ABS_LATITUDE: f64 = 89.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Axis-aligned box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a LatLon>) -> Self {
        let mut bbox = BoundingBox {
            lat_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
            lon_min: f64::INFINITY,
            lon_max: f64::NEG_INFINITY,
        };
        for p in points {
            bbox.lat_min = bbox.lat_min.min(p.lat);
            bbox.lat_max = bbox.lat_max.max(p.lat);
            bbox.lon_min = bbox.lon_min.min(p.lon);
            bbox.lon_max = bbox.lon_max.max(p.lon);
        }
        bbox
    }

    pub fn contains(&self, p: &LatLon) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.lat_min >= self.lat_min
            && other.lat_max <= self.lat_max
            && other.lon_min >= self.lon_min
            && other.lon_max <= self.lon_max
    }

    pub fn height_deg(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    pub fn width_deg(&self) -> f64 {
        self.lon_max - self.lon_min
    }
}

/// Identity and antenna parameters of one cell, as read from the cell inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub cell_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub azimuth: f64,
    /// Informational; the footprint model ignores it.
    #[serde(default)]
    pub tilt: f64,
    pub range_m: f64,
}

impl CellConfig {
    /// Checks bounds and returns a copy with the azimuth folded into [0, 360).
    pub fn validated(&self) -> Result<CellConfig> {
        if self.cell_id.trim().is_empty() {
            return Err(Error::Validation("cell_id is empty".into()));
        }
        if !self.latitude.is_finite() || !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::Validation(format!(
                "cell {}: latitude {} outside [-90, 90]",
                self.cell_id, self.latitude
            )));
        }
        if !self.longitude.is_finite() || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Validation(format!(
                "cell {}: longitude {} outside [-180, 180]",
                self.cell_id, self.longitude
            )));
        }
        if !self.tilt.is_finite() {
            return Err(Error::Validation(format!("cell {}: tilt is not finite", self.cell_id)));
        }
        if !self.range_m.is_finite() || self.range_m <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "cell {}: range_m must be > 0, got {}",
                self.cell_id, self.range_m
            )));
        }
        Ok(CellConfig {
            azimuth: normalize_azimuth(self.azimuth)?,
            ..self.clone()
        })
    }

    pub fn site(&self) -> LatLon {
        LatLon::new(self.latitude, self.longitude)
    }
}

/// Georeferenced rectangle approximating a cell's service sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageBox {
    /// Ring order: near-left, far-left, far-right, near-right, where "left"
    /// is the side at azimuth - 90.
    pub corners: [LatLon; 4],
    /// The site; midpoint of the near edge.
    pub apex: LatLon,
    /// Midpoint of the far edge, `range_m` from the apex along the azimuth.
    pub far_edge_mid: LatLon,
    pub bbox: BoundingBox,
}

/// Folds an angle in degrees into [0, 360).
pub fn normalize_azimuth(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::Validation(format!("azimuth {a} is not finite")));
    }
    let r = a.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    Ok(if r >= 360.0 { 0.0 } else { r })
}

/// Destination reached from `origin` after `distance_m` along the great
/// circle with initial bearing `bearing_deg`. The returned longitude is
/// `origin.lon + delta` and is not wrapped, so boxes stay contiguous.
pub fn destination(origin: LatLon, bearing_deg: f64, distance_m: f64) -> LatLon {
    let phi1 = origin.lat.to_radians();
    let theta = bearing_deg.to_radians();
    let delta = distance_m / EARTH_RADIUS_M;
    let (sin_phi1, cos_phi1) = phi1.sin_cos();
    let (sin_delta, cos_delta) = delta.sin_cos();
    let sin_phi2 = (sin_phi1 * cos_delta + cos_phi1 * sin_delta * theta.cos()).clamp(-1.0, 1.0);
    let phi2 = sin_phi2.asin();
    let dlambda = (theta.sin() * sin_delta * cos_phi1).atan2(cos_delta - sin_phi1 * sin_phi2);
    LatLon::new(phi2.to_degrees(), origin.lon + dlambda.to_degrees())
}

/// Initial great-circle bearing from `a` to `b`, degrees in [0, 360).
pub fn initial_bearing(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Haversine great-circle distance in meters.
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Rectangle approximating the sector served by `cell`.
pub fn sector_box(cell: &CellConfig, width_ratio: f64) -> Result<CoverageBox> {
    if !width_ratio.is_finite() || width_ratio <= 0.0 || width_ratio > 2.0 {
        return Err(Error::Validation(format!("width_ratio {width_ratio} outside (0, 2]")));
    }
    if cell.latitude.abs() > MAX_ABS_LATITUDE {
        return Err(Error::PolarUnsupported { latitude: cell.latitude });
    }
    let cell = cell.validated()?;
    let az = cell.azimuth;
    let half_width = 0.5 * width_ratio * cell.range_m;
    let apex = cell.site();

    let near_left = destination(apex, az - 90.0, half_width);
    let near_right = destination(apex, az + 90.0, half_width);
    let far_edge_mid = destination(apex, az, cell.range_m);
    // bearing of the track as it arrives at the far edge
    let arrival = (initial_bearing(far_edge_mid, apex) + 180.0).rem_euclid(360.0);
    let far_left = destination(far_edge_mid, arrival - 90.0, half_width);
    let far_right = destination(far_edge_mid, arrival + 90.0, half_width);

    let corners = [near_left, far_left, far_right, near_right];
    let bbox = BoundingBox::from_points(&corners);
    if !(bbox.height_deg() > 0.0 || bbox.width_deg() > 0.0) {
        return Err(Error::DegenerateGeometry(format!("cell {} has a zero-area footprint", cell.cell_id)));
    }
    Ok(CoverageBox { corners, apex, far_edge_mid, bbox })
}

/// Reads a cell inventory: header `cell_id,latitude,longitude,azimuth,tilt,range_m`.
pub fn read_cells(path: &Path) -> Result<Vec<CellConfig>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for record in reader.deserialize::<CellConfig>() {
        let cell = record?.validated()?;
        if !seen.insert(cell.cell_id.clone()) {
            return Err(Error::DuplicateCell(cell.cell_id));
        }
        cells.push(cell);
    }
    Ok(cells)
}

pub fn write_cells(path: &Path, cells: &[CellConfig]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for cell in cells {
        writer.serialize(cell)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(lat: f64, lon: f64, az: f64, range: f64) -> CellConfig {
        CellConfig {
            cell_id: "c".into(),
            latitude: lat,
            longitude: lon,
            azimuth: az,
            tilt: 3.0,
            range_m: range,
        }
    }

    /// Destination point by rotating the site's unit vector in 3D; shares no
    /// code with the spherical-trigonometry path above.
    fn nvector_destination(origin: LatLon, bearing_deg: f64, distance_m: f64) -> LatLon {
        let (lat, lon) = (origin.lat.to_radians(), origin.lon.to_radians());
        let p = [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()];
        let east = [-lon.sin(), lon.cos(), 0.0];
        let north = [-lat.sin() * lon.cos(), -lat.sin() * lon.sin(), lat.cos()];
        let b = bearing_deg.to_radians();
        let dir: Vec<f64> = (0..3).map(|i| north[i] * b.cos() + east[i] * b.sin()).collect();
        let d = distance_m / EARTH_RADIUS_M;
        let q: Vec<f64> = (0..3).map(|i| p[i] * d.cos() + dir[i] * d.sin()).collect();
        LatLon::new(q[2].atan2(q[0].hypot(q[1])).to_degrees(), q[1].atan2(q[0]).to_degrees())
    }

    #[test]
    fn normalize_azimuth_examples() {
        assert_eq!(normalize_azimuth(360.0).unwrap(), 0.0);
        assert_eq!(normalize_azimuth(-90.0).unwrap(), 270.0);
        assert_eq!(normalize_azimuth(725.0).unwrap(), 5.0);
        assert_eq!(normalize_azimuth(-1e-18).unwrap(), 0.0);
        assert!(matches!(normalize_azimuth(f64::NAN), Err(Error::Validation(_))));
        assert!(matches!(normalize_azimuth(f64::INFINITY), Err(Error::Validation(_))));
    }

    #[test]
    fn destination_agrees_with_nvector_oracle() {
        for &(lat, lon, brg, dist) in &[
            (0.0, 0.0, 0.0, 1113.2),
            (48.85, 2.35, 37.0, 2500.0),
            (-33.9, 151.2, 271.5, 800.0),
            (64.1, -21.9, 180.0, 15_000.0),
        ] {
            let a = destination(LatLon::new(lat, lon), brg, dist);
            let b = nvector_destination(LatLon::new(lat, lon), brg, dist);
            assert!((a.lat - b.lat).abs() < 1e-10, "{a:?} vs {b:?}");
            assert!((a.lon - b.lon).abs() < 1e-10, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn equator_north_box_matches_degree_arithmetic() {
        let b = sector_box(&cell(0.0, 0.0, 0.0, 1113.2), 1.0).unwrap();
        let far_lat = nvector_destination(LatLon::new(0.0, 0.0), 0.0, 1113.2).lat;
        assert!((b.far_edge_mid.lat - far_lat).abs() <= 1e-3 * far_lat);
        // 0.01 deg at 111,320 m/deg; a 6,371 km sphere gives 0.0100113 deg
        assert!((b.far_edge_mid.lat - 0.01).abs() < 2e-5);
        let half = nvector_destination(LatLon::new(0.0, 0.0), 90.0, 556.6).lon;
        assert!((half - 0.005).abs() < 1e-5);
        assert!((b.bbox.lon_max - half).abs() < 1e-9);
        assert!((b.bbox.lon_min + half).abs() < 1e-9);
        assert_eq!(b.apex, LatLon::new(0.0, 0.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(sector_box(&cell(0.0, 0.0, 0.0, 0.0), 1.0), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(sector_box(&cell(0.0, 0.0, 0.0, -5.0), 1.0), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(
            sector_box(&cell(89.95, 0.0, 0.0, 100.0), 1.0),
            Err(Error::PolarUnsupported { .. })
        ));
        assert!(matches!(sector_box(&cell(10.0, 0.0, 0.0, 100.0), 0.0), Err(Error::Validation(_))));
        assert!(matches!(sector_box(&cell(10.0, 0.0, 0.0, 100.0), 2.5), Err(Error::Validation(_))));
        assert!(matches!(sector_box(&cell(10.0, 200.0, 0.0, 100.0), 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn apex_is_near_edge_midpoint() {
        let b = sector_box(&cell(45.0, 7.0, 123.0, 900.0), 0.6).unwrap();
        let [nl, _, _, nr] = b.corners;
        let d_left = haversine_m(b.apex, nl);
        let d_right = haversine_m(b.apex, nr);
        assert!((d_left - 270.0).abs() < 1e-6 && (d_right - 270.0).abs() < 1e-6);
        for c in &b.corners {
            assert!(b.bbox.contains(c));
        }
    }

    #[test]
    fn read_cells_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.csv");
        std::fs::write(
            &path,
            "cell_id,latitude,longitude,azimuth,tilt,range_m\na,1,2,370,4,500\na,1,2,10,4,500\n",
        )
        .unwrap();
        assert!(matches!(read_cells(&path), Err(Error::DuplicateCell(id)) if id == "a"));
        std::fs::write(&path, "cell_id,latitude,longitude,azimuth,tilt,range_m\na,1,2,370,4,500\n").unwrap();
        let cells = read_cells(&path).unwrap();
        assert_eq!(cells[0].azimuth, 10.0);
    }
}
