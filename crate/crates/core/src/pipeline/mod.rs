//! End-to-end batch run: geometry, patches, embeddings, clustering,
//! training and evaluation, persisted under `output_dir/<run_id>`.

mod config;
mod snapshot;

pub use config::{ClusteringConfig, EvaluationConfig, PipelineConfig};
pub use snapshot::{what_if, ClusterInfo, RunSnapshot, WhatIfForecast, WhatIfRequest, WhatIfResponse, FORECAST_LABEL};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::{self, ForecastModel, MetricsReport, SummaryRow};
use crate::geometry::{self, CellConfig, CoverageBox};
use crate::kpi::{self, KpiSeries, NormParams};
use crate::profiling::{self, ClusterModel};
use crate::raster::{ImagePatch, RasterStore};
use crate::vision::{Embedding, VisionModel};
use crate::{seed, HISTORY_LEN, HORIZON_LEN, SAMPLE_PERIOD_S, WINDOW_LEN};

pub const STAGES: [&str; 6] = ["geometry", "patches", "embeddings", "clustering", "training", "evaluation"];
pub const RUN_FILE: &str = "run.json";
pub const CURRENT_FILE: &str = "current";
const LOCK_FILE: &str = ".lock";
const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub state: StageState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub backbone: String,
    pub state: StageState,
    pub stages: Vec<StageStatus>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub cells: usize,
    #[serde(default)]
    pub skipped_clusters: Vec<usize>,
    /// Relative path to SHA-256 of every artifact.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl PipelineRun {
    fn new(run_id: String, config_hash: String, config: &PipelineConfig) -> Self {
        Self {
            run_id,
            config_hash,
            seed: config.seed,
            backbone: config.backbone.clone(),
            state: StageState::Pending,
            stages: STAGES
                .iter()
                .map(|s| StageStatus {
                    name: s.to_string(),
                    state: StageState::Pending,
                    error: None,
                    error_kind: None,
                })
                .collect(),
            k: None,
            cells: 0,
            skipped_clusters: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageStatus> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn set(&mut self, name: &str, state: StageState, err: Option<&Error>) {
        if let Some(s) = self.stages.iter_mut().find(|s| s.name == name) {
            s.state = state;
            s.error = err.map(|e| e.to_string());
            s.error_kind = err.map(|e| e.name().to_string());
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        write_json_atomic(&run_dir.join(RUN_FILE), self)
    }
}

/// Training-history summary used to seed what-if forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub run_id: String,
    pub config_hash: String,
    pub cluster: usize,
    pub members: Vec<String>,
    pub training_cells: Vec<String>,
    /// Mean of the members' normalization parameters.
    pub norm: Option<NormParams>,
    /// Last 96 normalized samples of the cluster-average training segment.
    pub seed_history: Vec<f64>,
    pub history_start: DateTime<Utc>,
}

/// Last test window of one cell with the model's forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellForecast {
    pub cell_id: String,
    pub cluster: usize,
    pub forecast_start: DateTime<Utc>,
    pub step_minutes: i64,
    pub history: Vec<f64>,
    pub forecast: Vec<f64>,
    pub forecast_raw: Vec<f64>,
    pub actual: Vec<f64>,
    pub actual_raw: Vec<f64>,
}

/// JSON artifact with the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub run_id: String,
    pub config_hash: String,
    pub data: T,
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// File-system-safe version of a cell id.
pub fn file_stem(cell_id: &str) -> String {
    cell_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// SHA-256 of every file under `run_dir` except `run.json` and the lock.
pub fn artifact_checksums(run_dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel == RUN_FILE || rel == LOCK_FILE || rel.ends_with(".tmp") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, config::hex(&Sha256::digest(&bytes)));
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(run_dir, run_dir, &mut out)?;
    Ok(out)
}

/// Run id the `current` pointer refers to.
pub fn current_run_id(output_dir: &Path) -> Result<String> {
    let path = output_dir.join(CURRENT_FILE);
    match fs::read_to_string(&path) {
        Ok(s) => Ok(s.trim().to_string()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotReady(format!("no completed run in {}", output_dir.display()))),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn promote_current(output_dir: &Path, run_id: &str) -> Result<()> {
    let tmp = output_dir.join(format!("{CURRENT_FILE}.tmp"));
    let path = output_dir.join(CURRENT_FILE);
    fs::write(&tmp, format!("{run_id}\n")).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
}

/// Backbone for `config`, ready to embed.
pub fn build_vision(config: &PipelineConfig) -> Result<VisionModel> {
    let mut model = VisionModel::from_spec(config.backbone_spec()?)?;
    if !model.is_ready() && config.allow_random_init {
        model.init_random(seed::derive(config.seed, "backbone"))?;
    }
    if !model.is_ready() {
        return Err(Error::NotInitialized(format!(
            "{} (set backbone_weights or allow_random_init)",
            config.backbone
        )));
    }
    Ok(model)
}

pub(crate) fn training_config(config: &PipelineConfig) -> forecast::TrainingConfig {
    forecast::TrainingConfig {
        seed: seed::derive(config.seed, "training"),
        ..config.training.clone()
    }
}

struct Work<'a> {
    config: &'a PipelineConfig,
    dir: PathBuf,
    run_id: String,
    config_hash: String,
    cells: Vec<CellConfig>,
    boxes: Vec<CoverageBox>,
    store: Option<RasterStore>,
    patches: Vec<ImagePatch>,
    embeddings: Vec<Embedding>,
    clusters: Option<ClusterModel>,
    members: BTreeMap<usize, Vec<KpiSeries>>,
    models: Vec<ForecastModel>,
    per_cluster: Option<MetricsReport>,
}

impl Work<'_> {
    fn stamp<T>(&self, data: T) -> Stamped<T> {
        Stamped {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            data,
        }
    }

    fn run(&mut self, stage: &str) -> Result<()> {
        match stage {
            "geometry" => self.geometry(),
            "patches" => self.patches(),
            "embeddings" => self.embeddings(),
            "clustering" => self.clustering(),
            "training" => self.training(),
            "evaluation" => self.evaluation(),
            other => unreachable!("unknown stage {other}"),
        }
    }

    fn geometry(&mut self) -> Result<()> {
        self.cells = geometry::read_cells(&self.config.cells)?;
        if self.cells.is_empty() {
            return Err(Error::Validation(format!("{} lists no cells", self.config.cells.display())));
        }
        self.store = Some(RasterStore::open(&self.config.rasters)?);
        self.boxes = self
            .cells
            .iter()
            .map(|c| geometry::sector_box(c, self.config.width_ratio))
            .collect::<Result<_>>()?;
        let path = self.dir.join("coverage.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["cell_id".to_string()];
        for corner in ["near_left", "far_left", "far_right", "near_right"] {
            header.push(format!("{corner}_lat"));
            header.push(format!("{corner}_lon"));
        }
        header.extend(["lat_min", "lat_max", "lon_min", "lon_max"].map(String::from));
        w.write_record(&header)?;
        for (cell, b) in self.cells.iter().zip(&self.boxes) {
            let mut row = vec![cell.cell_id.clone()];
            for p in &b.corners {
                row.push(p.lat.to_string());
                row.push(p.lon.to_string());
            }
            for v in [b.bbox.lat_min, b.bbox.lat_max, b.bbox.lon_min, b.bbox.lon_max] {
                row.push(v.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn patches(&mut self) -> Result<()> {
        let store = self.store.as_ref().expect("geometry ran");
        let dir = self.dir.join("patches");
        mkdir(&dir)?;
        let mut patches = Vec::with_capacity(self.cells.len());
        for (cell, b) in self.cells.iter().zip(&self.boxes) {
            let patch = store.extract(b, &cell.cell_id).inspect_err(|e| {
                tracing::error!(cell = %cell.cell_id, error = %e, "patch extraction failed");
            })?;
            patch.to_rgb_image().save_with_format(dir.join(format!("{}.png", file_stem(&cell.cell_id))), image::ImageFormat::Png)?;
            patches.push(patch);
        }
        self.patches = patches;
        Ok(())
    }

    fn embeddings(&mut self) -> Result<()> {
        let model = build_vision(self.config)?;
        let mut out = Vec::with_capacity(self.patches.len());
        for chunk in self.patches.chunks(EMBED_BATCH) {
            out.extend(model.embed_batch(chunk)?);
        }
        let path = self.dir.join("embeddings.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let dim = out.first().map_or(0, |e| e.vector.len());
        let mut header = vec!["cell_id".to_string(), "backbone".to_string()];
        header.extend((0..dim).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        for e in &out {
            let mut row = vec![e.cell_id.clone(), e.backbone_name.clone()];
            row.extend(e.vector.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.embeddings = out;
        Ok(())
    }

    fn clustering(&mut self) -> Result<()> {
        let c = &self.config.clustering;
        let model = profiling::fit_clusters_with(
            &self.embeddings,
            c.k_min..=c.k_max,
            c.k_override,
            &c.kmeans(),
            seed::derive(self.config.seed, "clustering"),
        )?;
        model.save(&self.dir.join("clusters"))?;
        self.clusters = Some(model);
        Ok(())
    }

    fn training(&mut self) -> Result<()> {
        let clusters = self.clusters.as_ref().expect("clustering ran");
        let mut by_cell: BTreeMap<String, KpiSeries> = kpi::read_kpis(&self.config.kpis, &self.config.kpi_name, self.config.gap_fill)?
            .into_iter()
            .map(|s| (s.cell_id.clone(), s))
            .collect();
        let missing: Vec<&str> = self
            .cells
            .iter()
            .map(|c| c.cell_id.as_str())
            .filter(|id| !by_cell.contains_key(*id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "no {} series for {} cell(s): {}",
                self.config.kpi_name,
                missing.len(),
                missing.join(", ")
            )));
        }
        let mut members: BTreeMap<usize, Vec<KpiSeries>> = BTreeMap::new();
        for cell in &self.cells {
            let raw = by_cell.remove(&cell.cell_id).expect("checked above");
            if raw.len() < kpi::MIN_SPLIT_LEN {
                return Err(Error::TooShort {
                    needed: kpi::MIN_SPLIT_LEN,
                    got: raw.len(),
                });
            }
            let cut = kpi::split_point(raw.len(), kpi::TRAIN_FRACTION);
            let norm = kpi::normalize(&raw, 0..cut)?;
            members.entry(clusters.membership[&cell.cell_id]).or_default().push(norm);
        }

        let tcfg = training_config(self.config);
        let (report, mut models) = forecast::per_cluster_experiment(&members, &tcfg)?;
        let mdir = self.dir.join("models");
        let pdir = self.dir.join("profiles");
        mkdir(&mdir)?;
        mkdir(&pdir)?;
        for model in &mut models {
            model.provenance.insert("run_id".into(), self.run_id.clone());
            model.provenance.insert("config_hash".into(), self.config_hash.clone());
            model.provenance.insert("experiment".into(), forecast::ExperimentTag::PerCluster.to_string());
            model.save(&mdir.join(format!("cluster_{}.json", model.cluster)))?;

            let series = &members[&model.cluster];
            let train: Vec<KpiSeries> = series
                .iter()
                .filter(|s| model.training_cells.contains(&s.cell_id))
                .map(|s| s.slice(0..kpi::split_point(s.len(), kpi::TRAIN_FRACTION)))
                .collect();
            let refs: Vec<&KpiSeries> = train.iter().collect();
            let avg = kpi::average_of(model.cluster, &refs)?;
            let from = avg.len() - HISTORY_LEN;
            let mut member_ids: Vec<String> = series.iter().map(|s| s.cell_id.clone()).collect();
            member_ids.sort();
            let profile = ClusterProfile {
                run_id: self.run_id.clone(),
                config_hash: self.config_hash.clone(),
                cluster: model.cluster,
                members: member_ids,
                training_cells: model.training_cells.clone(),
                norm: avg.norm,
                seed_history: avg.values[from..].to_vec(),
                history_start: avg.timestamp(from),
            };
            write_json_atomic(&pdir.join(format!("cluster_{}.json", model.cluster)), &profile)?;
        }
        self.members = members;
        self.models = models;
        self.per_cluster = Some(report);
        Ok(())
    }

    fn evaluation(&mut self) -> Result<()> {
        let dir = self.dir.join("metrics");
        mkdir(&dir)?;
        let per_cluster = self.per_cluster.take().expect("training ran");
        per_cluster.write_csv(&dir.join("per_cluster.csv"))?;
        let mut rows: Vec<SummaryRow> = vec![per_cluster.summary.clone()];
        let mut tables = per_cluster.to_table();

        let mut baseline = BTreeMap::new();
        for (&cluster, series) in &self.members {
            let mses = series
                .iter()
                .map(|s| forecast::persistence_baseline_mse(&s.slice(kpi::split_point(s.len(), kpi::TRAIN_FRACTION)..s.len())))
                .collect::<Result<Vec<_>>>()?;
            baseline.insert(cluster, forecast::mean_std(&mses).0);
        }
        write_json_atomic(&dir.join("baseline.json"), &self.stamp(&baseline))?;

        if self.config.evaluation.cold_start {
            match forecast::cold_start_experiment(
                &self.members,
                self.config.evaluation.mask_fraction,
                seed::derive(self.config.seed, "mask"),
                &training_config(self.config),
            ) {
                Ok((report, _)) => {
                    report.write_csv(&dir.join("cold_start.csv"))?;
                    rows.push(report.summary.clone());
                    tables.push('\n');
                    tables.push_str(&report.to_table());
                    write_json_atomic(&dir.join("cold_start.json"), &self.stamp(&report))?;
                }
                Err(Error::NothingToEvaluate(why)) => tracing::warn!(%why, "cold-start experiment skipped"),
                Err(e) => return Err(e),
            }
        }
        write_json_atomic(&dir.join("per_cluster.json"), &self.stamp(&per_cluster))?;
        write_json_atomic(&dir.join("summary.json"), &self.stamp(&rows))?;
        fs::write(dir.join("summary.txt"), tables).map_err(|e| Error::io(dir.join("summary.txt"), e))?;

        let models: BTreeMap<usize, &ForecastModel> = self.models.iter().map(|m| (m.cluster, m)).collect();
        let mut forecasts = BTreeMap::new();
        for (&cluster, series) in &self.members {
            let Some(model) = models.get(&cluster) else { continue };
            for s in series {
                let n = s.len();
                let test_start = kpi::split_point(n, kpi::TRAIN_FRACTION);
                if n - test_start < WINDOW_LEN {
                    continue;
                }
                let history = s.values[n - WINDOW_LEN..n - HORIZON_LEN].to_vec();
                let actual = s.values[n - HORIZON_LEN..].to_vec();
                let forecast = model.predict(&history)?;
                let invert = |v: &[f64]| match s.norm {
                    Some(p) => v.iter().map(|&y| p.invert(y)).collect(),
                    None => v.to_vec(),
                };
                forecasts.insert(
                    s.cell_id.clone(),
                    CellForecast {
                        cell_id: s.cell_id.clone(),
                        cluster,
                        forecast_start: s.timestamp(n - HORIZON_LEN),
                        step_minutes: SAMPLE_PERIOD_S / 60,
                        forecast_raw: invert(&forecast),
                        actual_raw: invert(&actual),
                        history,
                        forecast,
                        actual,
                    },
                );
            }
        }
        let fdir = self.dir.join("forecasts");
        mkdir(&fdir)?;
        write_json_atomic(&fdir.join("cells.json"), &self.stamp(&forecasts))?;
        Ok(())
    }
}

/// Runs every stage in order. A failing stage is recorded in `run.json`
/// and returned wrapped in [`Error::Stage`]; completed runs are promoted
/// to `output_dir/current`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    let run_id = config.run_id()?;
    let config_hash = config.hash()?;
    let dir = config.output_dir.join(&run_id);
    mkdir(&dir)?;
    let _lock = RunLock::acquire(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(dir.join("config.toml"), e))?;

    let mut run = PipelineRun::new(run_id.clone(), config_hash.clone(), config);
    run.state = StageState::Running;
    run.save(&dir)?;
    let mut work = Work {
        config,
        dir: dir.clone(),
        run_id: run_id.clone(),
        config_hash,
        cells: Vec::new(),
        boxes: Vec::new(),
        store: None,
        patches: Vec::new(),
        embeddings: Vec::new(),
        clusters: None,
        members: BTreeMap::new(),
        models: Vec::new(),
        per_cluster: None,
    };
    for stage in STAGES {
        run.set(stage, StageState::Running, None);
        run.save(&dir)?;
        tracing::info!(run = %run_id, stage, "stage started");
        if let Err(e) = work.run(stage) {
            tracing::error!(run = %run_id, stage, error = %e, "stage failed");
            run.set(stage, StageState::Failed, Some(&e));
            run.state = StageState::Failed;
            run.artifacts = artifact_checksums(&dir)?;
            run.save(&dir)?;
            return Err(e.at_stage(stage));
        }
        run.set(stage, StageState::Completed, None);
        match stage {
            "geometry" => run.cells = work.cells.len(),
            "clustering" => run.k = work.clusters.as_ref().map(|c| c.k),
            "training" => run.skipped_clusters = work.per_cluster.as_ref().map(|r| r.skipped_clusters.clone()).unwrap_or_default(),
            _ => {}
        }
    }
    run.state = StageState::Completed;
    run.artifacts = artifact_checksums(&dir)?;
    run.save(&dir)?;
    promote_current(&config.output_dir, &run_id)?;
    Ok(run)
}
