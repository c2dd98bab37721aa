use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::{
    build_vision, current_run_id, read_json, CellForecast, ClusterProfile, PipelineConfig, PipelineRun, StageState,
    Stamped,
};
use crate::error::{Error, Result};
use crate::forecast::{ClusterSummary, ForecastModel, MetricsReport};
use crate::geometry::{sector_box, CellConfig, CoverageBox};
use crate::profiling::ClusterModel;
use crate::raster::RasterStore;
use crate::vision::VisionModel;
use crate::{HORIZON_LEN, SAMPLE_PERIOD_S};

/// Label attached to every what-if forecast.
pub const FORECAST_LABEL: &str = "cluster-typical forecast";

/// Everything needed to serve a completed run. Read-only once loaded.
pub struct RunSnapshot {
    pub dir: PathBuf,
    pub run: PipelineRun,
    pub config: PipelineConfig,
    pub clusters: ClusterModel,
    pub models: BTreeMap<usize, ForecastModel>,
    pub profiles: BTreeMap<usize, ClusterProfile>,
    pub per_cluster: MetricsReport,
    pub cold_start: Option<MetricsReport>,
    pub forecasts: BTreeMap<String, CellForecast>,
    store: RasterStore,
    vision: VisionModel,
}

impl std::fmt::Debug for RunSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunSnapshot")
            .field("dir", &self.dir)
            .field("run_id", &self.run.run_id)
            .field("k", &self.clusters.k)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub candidate: CellConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfForecast {
    pub label: String,
    pub start: DateTime<Utc>,
    pub step_minutes: i64,
    pub normalized: Vec<f64>,
    pub denormalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub run_id: String,
    pub cell_id: String,
    pub cluster_index: usize,
    pub cluster_distance: f64,
    pub ood_threshold: f64,
    /// Distance exceeds the 99th percentile of training distances.
    pub out_of_distribution: bool,
    pub coverage: CoverageBox,
    pub forecast: WhatIfForecast,
    pub cluster_summary: ClusterInfo,
}

/// Per-cluster view served by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub cluster_index: usize,
    pub member_count: usize,
    pub members: Vec<String>,
    pub has_model: bool,
    pub per_cluster: Option<ClusterSummary>,
    pub cold_start: Option<ClusterSummary>,
}

impl RunSnapshot {
    /// Loads a completed run; anything else is [`Error::NotReady`].
    pub fn load(run_dir: &Path) -> Result<Self> {
        let run = PipelineRun::load(run_dir).map_err(|e| match e {
            Error::Io { path, .. } => Error::NotReady(format!("{} is missing", path.display())),
            e => e,
        })?;
        if run.state != StageState::Completed {
            let stage = run
                .stages
                .iter()
                .find(|s| s.state != StageState::Completed)
                .map_or("?", |s| s.name.as_str());
            return Err(Error::NotReady(format!("run {} stopped at stage {stage}", run.run_id)));
        }
        let config = PipelineConfig::load(&run_dir.join("config.toml"))?;
        let clusters = ClusterModel::load(&run_dir.join("clusters"))?;
        let mut models = BTreeMap::new();
        let mut profiles = BTreeMap::new();
        for c in 0..clusters.k {
            let path = run_dir.join("models").join(format!("cluster_{c}.json"));
            if path.exists() {
                models.insert(c, ForecastModel::load(&path)?);
                let profile: ClusterProfile = read_json(&run_dir.join("profiles").join(format!("cluster_{c}.json")))?;
                profiles.insert(c, profile);
            }
        }
        let metrics = run_dir.join("metrics");
        let per_cluster: Stamped<MetricsReport> = read_json(&metrics.join("per_cluster.json"))?;
        let cold_path = metrics.join("cold_start.json");
        let cold_start = if cold_path.exists() {
            Some(read_json::<Stamped<MetricsReport>>(&cold_path)?.data)
        } else {
            None
        };
        let forecasts: Stamped<BTreeMap<String, CellForecast>> = read_json(&run_dir.join("forecasts").join("cells.json"))?;
        let store = RasterStore::open(&config.rasters)?;
        let vision = build_vision(&config)?;
        Ok(Self {
            dir: run_dir.to_path_buf(),
            run,
            config,
            clusters,
            models,
            profiles,
            per_cluster: per_cluster.data,
            cold_start,
            forecasts: forecasts.data,
            store,
            vision,
        })
    }

    /// Loads the run `output_dir/current` points at.
    pub fn load_current(output_dir: &Path) -> Result<Self> {
        Self::load(&output_dir.join(current_run_id(output_dir)?))
    }

    pub fn run_id(&self) -> &str {
        &self.run.run_id
    }

    /// Union of the raster tiles' extents.
    pub fn raster_extent(&self) -> Option<crate::geometry::BoundingBox> {
        self.store.extent()
    }

    pub fn cluster_info(&self) -> Vec<ClusterInfo> {
        self.clusters
            .members()
            .into_iter()
            .enumerate()
            .map(|(c, members)| ClusterInfo {
                cluster_index: c,
                member_count: members.len(),
                members,
                has_model: self.models.contains_key(&c),
                per_cluster: self.per_cluster.cluster(c).cloned(),
                cold_start: self.cold_start.as_ref().and_then(|r| r.cluster(c).cloned()),
            })
            .collect()
    }
}

/// Forecast for a prospective cell with no KPI history: its coverage patch
/// is embedded, assigned to the nearest cluster, and that cluster's model
/// is run on the cluster's recent history.
pub fn what_if(request: &WhatIfRequest, snapshot: &RunSnapshot) -> Result<WhatIfResponse> {
    let cell = request.candidate.validated()?;
    let coverage = sector_box(&cell, snapshot.config.width_ratio)?;
    let patch = snapshot.store.extract(&coverage, &cell.cell_id)?;
    let embedding = snapshot.vision.embed(&patch)?;
    let assignment = snapshot.clusters.assign_detailed(&embedding.vector)?;
    let c = assignment.cluster;
    let (Some(model), Some(profile)) = (snapshot.models.get(&c), snapshot.profiles.get(&c)) else {
        return Err(Error::NotReady(format!("cluster {c} has no trained forecaster")));
    };
    let normalized = model.predict(&profile.seed_history)?;
    let denormalized = match profile.norm {
        Some(n) => normalized.iter().map(|&y| n.invert(y)).collect(),
        None => normalized.clone(),
    };
    let start = profile.history_start + Duration::seconds(SAMPLE_PERIOD_S * profile.seed_history.len() as i64);
    debug_assert_eq!(normalized.len(), HORIZON_LEN);
    let info = snapshot
        .cluster_info()
        .into_iter()
        .nth(c)
        .expect("assigned cluster exists");
    Ok(WhatIfResponse {
        run_id: snapshot.run.run_id.clone(),
        cell_id: cell.cell_id,
        cluster_index: c,
        cluster_distance: assignment.distance,
        ood_threshold: snapshot.clusters.ood_threshold,
        out_of_distribution: assignment.out_of_distribution,
        coverage,
        forecast: WhatIfForecast {
            label: FORECAST_LABEL.to_string(),
            start,
            step_minutes: SAMPLE_PERIOD_S / 60,
            normalized,
            denormalized,
        },
        cluster_summary: info,
    })
}
