//! Synthetic scenarios: cells placed on land-cover strips, a rendered
//! raster, and KPI series whose diurnal shape depends on the land cover.
//! Archetype labels are kept apart from the pipeline inputs.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{write_cells, CellConfig, LatLon, EARTH_RADIUS_M};
use crate::kpi::{write_kpis, KpiSeries};
use crate::raster::{make_synthetic_tile, GeoTransform, LandCover, Layout, RasterStore, RasterTile, Region};
use crate::{seed, HISTORY_LEN};

pub const KPI_NAME: &str = "traffic_volume";
pub const SEASON_TAG: &str = "summer";
const TEMPLATE_RANGE: (f64, f64) = (0.05, 0.95);
const MAX_NOISE_STD: f64 = 0.1;
/// Sites keep this multiple of the maximum range away from strip edges, so
/// every coverage box stays on its own land cover.
const EDGE_MARGIN: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    pub cover: LandCover,
    /// One day at 15-minute resolution (96 samples).
    pub template: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub archetypes: Vec<Archetype>,
    pub cells_per_archetype: usize,
    pub days: usize,
    pub seed: u64,
    /// North-west corner of the rendered tile.
    pub origin: LatLon,
    pub resolution_m: f64,
    /// Size of each archetype's strip in pixels.
    pub strip_width_px: usize,
    pub strip_height_px: usize,
    pub range_m: (f64, f64),
    pub start: DateTime<Utc>,
}

fn hour(t: usize) -> f64 {
    t as f64 / 4.0
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((h - centre) / width).powi(2)).exp()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Morning ramp and evening peak.
pub fn residential_template() -> Vec<f64> {
    (0..HISTORY_LEN)
        .map(|t| {
            let h = hour(t);
            0.12 + 0.3 * bump(h, 8.0, 1.5) + 0.6 * bump(h, 20.0, 2.0)
        })
        .collect()
}

/// Midday plateau over working hours.
pub fn industrial_template() -> Vec<f64> {
    (0..HISTORY_LEN)
        .map(|t| {
            let h = hour(t);
            0.1 + 0.75 * logistic((h - 7.5) / 0.6) * logistic((17.5 - h) / 0.6)
        })
        .collect()
}

/// Low traffic with a broad afternoon swell.
pub fn forest_template() -> Vec<f64> {
    (0..HISTORY_LEN)
        .map(|t| 0.1 + 0.35 * bump(hour(t), 13.0, 3.5) + 0.02 * (2.0 * PI * hour(t) / 24.0).cos())
        .collect()
}

impl ScenarioSpec {
    /// Residential, forest and industrial archetypes.
    pub fn standard(cells_per_archetype: usize, days: usize, noise_std: f64, seed: u64) -> Self {
        let archetype = |name: &str, cover, template| Archetype {
            name: name.into(),
            cover,
            template,
            noise_std,
        };
        Self {
            archetypes: vec![
                archetype("residential", LandCover::Residential, residential_template()),
                archetype("forest", LandCover::Forest, forest_template()),
                archetype("industrial", LandCover::Industrial, industrial_template()),
            ],
            cells_per_archetype,
            days,
            seed,
            origin: LatLon::new(48.15, 11.55),
            resolution_m: 10.0,
            strip_width_px: 200,
            strip_height_px: 400,
            range_m: (300.0, 500.0),
            start: Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.archetypes.len() < 2 {
            return Err(Error::OracleUseless(format!(
                "{} archetype(s); at least 2 are needed to validate clustering",
                self.archetypes.len()
            )));
        }
        let mut names = HashSet::new();
        for a in &self.archetypes {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Validation(format!("archetype name {:?} is repeated", a.name)));
            }
            if a.template.len() != HISTORY_LEN {
                return Err(Error::Validation(format!(
                    "template of {:?} has {} samples, expected {HISTORY_LEN}",
                    a.name,
                    a.template.len()
                )));
            }
            if a.template.iter().any(|v| !(TEMPLATE_RANGE.0..=TEMPLATE_RANGE.1).contains(v)) {
                return Err(Error::Validation(format!("template of {:?} leaves [0.05, 0.95]", a.name)));
            }
            if !(0.0..MAX_NOISE_STD).contains(&a.noise_std) {
                return Err(Error::Validation(format!("noise std of {:?} must be in [0, 0.1)", a.name)));
            }
        }
        if self.cells_per_archetype == 0 || self.days == 0 {
            return Err(Error::Validation("cells_per_archetype and days must be positive".into()));
        }
        let (lo, hi) = self.range_m;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Validation(format!("bad range interval ({lo}, {hi})")));
        }
        let margin_px = (EDGE_MARGIN * hi / self.resolution_m).ceil() as usize;
        if 2 * margin_px >= self.strip_width_px || 2 * margin_px >= self.strip_height_px {
            return Err(Error::Validation("strips are too small for the cell ranges".into()));
        }
        Ok(())
    }

    fn deg_per_px(&self) -> (f64, f64) {
        let m_per_deg = EARTH_RADIUS_M * PI / 180.0;
        let lat = self.resolution_m / m_per_deg;
        (lat, lat / self.origin.lat.to_radians().cos())
    }

    pub fn layout(&self) -> Layout {
        let (dlat, dlon) = self.deg_per_px();
        Layout {
            width: self.strip_width_px * self.archetypes.len(),
            height: self.strip_height_px,
            geo_transform: GeoTransform::north_up(self.origin, dlat, dlon),
            resolution_m: self.resolution_m,
            season_tag: SEASON_TAG.into(),
            regions: self
                .archetypes
                .iter()
                .enumerate()
                .map(|(i, a)| Region {
                    row0: 0,
                    row1: self.strip_height_px,
                    col0: i * self.strip_width_px,
                    col1: (i + 1) * self.strip_width_px,
                    cover: a.cover,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub cells: Vec<CellConfig>,
    pub tile: RasterTile,
    /// Raw (unnormalized) KPI series, one per cell, in cell order.
    pub kpis: Vec<KpiSeries>,
    /// Ground truth: cell id to archetype name. Not a pipeline input.
    pub labels: BTreeMap<String, String>,
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let layout = spec.layout();
    let tile = make_synthetic_tile(&layout, seed::derive(spec.seed, "raster"))?;
    let (dlat, dlon) = spec.deg_per_px();
    let margin_px = EDGE_MARGIN * spec.range_m.1 / spec.resolution_m;

    let total = spec.archetypes.len() * spec.cells_per_archetype;
    // neutral ids in random order so nothing about the archetype leaks through them
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut seed::rng(seed::derive(spec.seed, "ids")));

    let mut placed = Vec::with_capacity(total);
    for a_idx in 0..spec.archetypes.len() {
        let mut rng = seed::rng(seed::derive_index(spec.seed, "sites", a_idx));
        for _ in 0..spec.cells_per_archetype {
            let col = a_idx as f64 * spec.strip_width_px as f64
                + rng.random_range(margin_px..spec.strip_width_px as f64 - margin_px);
            let row = rng.random_range(margin_px..spec.strip_height_px as f64 - margin_px);
            let id = format!("cell_{:04}", ids[placed.len()]);
            let cell = CellConfig {
                cell_id: id,
                latitude: spec.origin.lat - row * dlat,
                longitude: spec.origin.lon + col * dlon,
                azimuth: rng.random_range(0.0..360.0),
                tilt: rng.random_range(2.0..8.0),
                range_m: rng.random_range(spec.range_m.0..=spec.range_m.1),
            };
            placed.push((cell, a_idx));
        }
    }
    placed.sort_by(|a, b| a.0.cell_id.cmp(&b.0.cell_id));

    let samples = spec.days * HISTORY_LEN;
    let mut cells = Vec::with_capacity(total);
    let mut kpis = Vec::with_capacity(total);
    let mut labels = BTreeMap::new();
    for (cell, a_idx) in placed {
        let arch = &spec.archetypes[a_idx];
        let mut rng = seed::rng(seed::derive(spec.seed, &format!("kpi/{}", cell.cell_id)));
        let values = if arch.noise_std == 0.0 {
            (0..samples).map(|t| arch.template[t % HISTORY_LEN]).collect()
        } else {
            let noise = Normal::new(0.0, arch.noise_std).expect("valid std");
            (0..samples)
                .map(|t| (arch.template[t % HISTORY_LEN] + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect()
        };
        kpis.push(KpiSeries::new(cell.cell_id.clone(), spec.start, values));
        labels.insert(cell.cell_id.clone(), arch.name.clone());
        cells.push(cell);
    }
    Ok(Scenario {
        spec: spec.clone(),
        cells,
        tile,
        kpis,
        labels,
    })
}

/// Where [`Scenario::write`] put each input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPaths {
    pub root: PathBuf,
    pub cells: PathBuf,
    pub rasters: PathBuf,
    pub kpis: PathBuf,
    /// Ground truth, outside every pipeline input path.
    pub oracle: PathBuf,
}

impl Scenario {
    /// Writes the same file formats the real ingesters read: `cells.csv`,
    /// `rasters/` (store with manifest), `kpis.csv`. Labels and the spec go
    /// to `oracle/`.
    pub fn write(&self, root: &Path) -> Result<ScenarioPaths> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let paths = ScenarioPaths {
            root: root.to_path_buf(),
            cells: root.join("cells.csv"),
            rasters: root.join("rasters"),
            kpis: root.join("kpis.csv"),
            oracle: root.join("oracle"),
        };
        write_cells(&paths.cells, &self.cells)?;
        RasterStore::create(&paths.rasters, std::slice::from_ref(&self.tile))?;
        write_kpis(&paths.kpis, KPI_NAME, &self.kpis)?;
        fs::create_dir_all(&paths.oracle).map_err(|e| Error::io(&paths.oracle, e))?;
        let mut w = csv::Writer::from_path(paths.oracle.join("labels.csv"))?;
        w.write_record(["cell_id", "archetype"])?;
        for (cell, label) in &self.labels {
            w.write_record([cell, label])?;
        }
        w.flush().map_err(|e| Error::io(&paths.oracle, e))?;
        let spec = paths.oracle.join("spec.json");
        fs::write(&spec, serde_json::to_vec_pretty(&self.spec)?).map_err(|e| Error::io(&spec, e))?;
        Ok(paths)
    }

    /// Archetype index per cell, in `cells` order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .map(|c| {
                let name = &self.labels[&c.cell_id];
                self.spec.archetypes.iter().position(|a| &a.name == name).expect("known archetype")
            })
            .collect()
    }
}

/// Reads `oracle/labels.csv`.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize::<(String, String)>() {
        let (cell, label) = row?;
        out.insert(cell, label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sector_box;

    #[test]
    fn templates_are_in_range() {
        for t in [residential_template(), industrial_template(), forest_template()] {
            assert_eq!(t.len(), 96);
            assert!(t.iter().all(|v| (0.05..=0.95).contains(v)), "{t:?}");
        }
    }

    #[test]
    fn noiseless_series_tile_the_template() {
        let s = generate_scenario(&ScenarioSpec::standard(2, 3, 0.0, 5)).unwrap();
        for (k, cell) in s.kpis.iter().zip(&s.cells) {
            let arch = s.spec.archetypes.iter().find(|a| a.name == s.labels[&cell.cell_id]).unwrap();
            assert_eq!(k.len(), 3 * 96);
            for (t, v) in k.values.iter().enumerate() {
                assert_eq!(*v, arch.template[t % 96]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::standard(3, 2, 0.02, 11);
        assert_eq!(generate_scenario(&spec).unwrap(), generate_scenario(&spec).unwrap());
    }

    #[test]
    fn one_archetype_is_useless() {
        let mut spec = ScenarioSpec::standard(3, 2, 0.02, 11);
        spec.archetypes.truncate(1);
        assert!(matches!(generate_scenario(&spec), Err(Error::OracleUseless(_))));
    }

    #[test]
    fn coverage_boxes_stay_on_their_own_land_cover() {
        let s = generate_scenario(&ScenarioSpec::standard(20, 1, 0.02, 3)).unwrap();
        let layout = s.spec.layout();
        for cell in &s.cells {
            let b = sector_box(cell, 1.0).unwrap().bbox;
            let arch = s.spec.archetypes.iter().find(|a| a.name == s.labels[&cell.cell_id]).unwrap();
            for p in [LatLon::new(b.lat_min, b.lon_min), LatLon::new(b.lat_max, b.lon_max)] {
                let (row, col) = layout.geo_transform.to_pixel(p);
                assert_eq!(layout.cover_at(row as usize, col as usize), Some(arch.cover), "{}", cell.cell_id);
            }
        }
    }

    #[test]
    fn written_inputs_exclude_labels() {
        let s = generate_scenario(&ScenarioSpec::standard(2, 2, 0.02, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = s.write(dir.path()).unwrap();
        let cells = fs::read_to_string(&p.cells).unwrap();
        let kpis = fs::read_to_string(&p.kpis).unwrap();
        for name in ["residential", "forest", "industrial"] {
            assert!(!cells.contains(name) && !kpis.contains(name));
        }
        assert_eq!(read_labels(&p.oracle.join("labels.csv")).unwrap(), s.labels);
    }
}
