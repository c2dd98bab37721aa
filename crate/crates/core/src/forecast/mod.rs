//! One recurrent forecaster per cluster, trained on the cluster-average
//! series, plus the per-cluster and cold-start evaluation experiments.

pub mod lstm;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kpi::{self, KpiSeries, CLAMP_RANGE};
use crate::{seed, HISTORY_LEN, HORIZON_LEN, WINDOW_LEN};
use lstm::{clip_grad_norm, forward, mse_loss_and_grad, Adam, Shape};

/// Clusters with fewer members are skipped by the cold-start experiment.
pub const MIN_COLD_START_MEMBERS: usize = 5;
pub const MASK_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Global L2 gradient-norm cap.
    pub grad_clip: f64,
    /// Spacing between training window origins (1 = every window).
    pub window_stride: usize,
    /// `"adam"` or `"sgd"` (fixed-step descent).
    pub optimizer: String,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            layers: 1,
            epochs: 30,
            learning_rate: 3e-3,
            lr_decay: 0.95,
            batch_size: 64,
            grad_clip: 1.0,
            window_stride: 1,
            optimizer: "adam".into(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.layers == 0 || self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Validation(
                "hidden_size, layers, batch_size and window_stride must be positive".into(),
            ));
        }
        if !matches!(self.optimizer.as_str(), "adam" | "sgd") {
            return Err(Error::Validation(format!("optimizer {:?} is not one of adam, sgd", self.optimizer)));
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Validation("learning_rate, lr_decay and grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Same config with the seed used for `cluster`. Both experiments
    /// derive it the same way.
    pub fn for_cluster(&self, cluster: usize) -> TrainingConfig {
        TrainingConfig {
            seed: seed::derive_index(self.seed, "cluster", cluster),
            ..self.clone()
        }
    }

    fn shape(&self) -> Shape {
        Shape {
            hidden: self.hidden_size,
            layers: self.layers,
            outputs: HORIZON_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentTag {
    PerCluster,
    ColdStart,
}

impl fmt::Display for ExperimentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentTag::PerCluster => "per-cluster",
            ExperimentTag::ColdStart => "cold-start",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub cluster: usize,
    pub config: TrainingConfig,
    pub input_len: usize,
    pub output_len: usize,
    /// Flat network parameters.
    pub params: Vec<f32>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Cells whose series entered the training average.
    pub training_cells: Vec<String>,
    /// Free-form provenance (run id, config hash).
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

fn check_history(history: &[f64]) -> Result<()> {
    if history.len() != HISTORY_LEN {
        return Err(Error::Shape(format!("history has {} values, expected {HISTORY_LEN}", history.len())));
    }
    if history.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("history".into()));
    }
    Ok(())
}

impl ForecastModel {
    fn shape(&self) -> Shape {
        self.config.shape()
    }

    /// 32 normalized values following `history` (96 normalized values),
    /// clamped to the normalization clamp range.
    pub fn predict(&self, history: &[f64]) -> Result<Vec<f64>> {
        check_history(history)?;
        let x = ArrayView2::from_shape((1, HISTORY_LEN), history).expect("shape checked");
        Ok(self.predict_batch(x).row(0).to_vec())
    }

    /// Row-wise predictions for `batch x 96` histories.
    pub fn predict_batch(&self, histories: ArrayView2<f64>) -> Array2<f64> {
        let x = histories.mapv(|v| v as f32);
        let (y, _) = forward(&self.shape(), &self.params, x.view(), false);
        y.mapv(|v| f64::from(v).clamp(CLAMP_RANGE.0, CLAMP_RANGE.1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: ForecastModel = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        if model.params.len() != model.shape().len() || model.input_len != HISTORY_LEN || model.output_len != HORIZON_LEN {
            return Err(Error::Shape(format!("model file {} has an inconsistent layout", path.display())));
        }
        Ok(model)
    }
}

/// Trains on every (96, 32) window of `train_series`, usually the
/// training segment of a cluster-average series.
pub fn train_cluster_model(cluster: usize, train_series: &KpiSeries, config: &TrainingConfig) -> Result<ForecastModel> {
    config.validate()?;
    let values = &train_series.values;
    if values.len() < WINDOW_LEN {
        return Err(Error::TooShort {
            needed: WINDOW_LEN,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(train_series.cell_id.clone()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return Err(Error::DegenerateSeries(train_series.cell_id.clone()));
    }

    let shape = config.shape();
    let origins: Vec<usize> = (0..kpi::window_count(values.len())).step_by(config.window_stride).collect();
    let x = Array2::from_shape_fn((origins.len(), HISTORY_LEN), |(i, j)| values[origins[i] + j] as f32);
    let y = Array2::from_shape_fn((origins.len(), HORIZON_LEN), |(i, j)| values[origins[i] + HISTORY_LEN + j] as f32);

    let mut theta: Vec<f32> = shape.init(&mut seed::rng(seed::derive(config.seed, "init")));
    let mut adam = (config.optimizer == "adam").then(|| Adam::new(theta.len()));
    let mut order: Vec<usize> = (0..origins.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = (config.learning_rate * config.lr_decay.powi(epoch as i32)) as f32;
        order.shuffle(&mut seed::rng(seed::derive_index(config.seed, "epoch", epoch)));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let (loss, mut grad) = mse_loss_and_grad(&shape, &theta, xb.view(), yb.view());
            clip_grad_norm(&mut grad, config.grad_clip as f32);
            match adam.as_mut() {
                Some(adam) => adam.update(&mut theta, &grad, lr),
                None => theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= lr * g),
            }
            total += f64::from(loss) * batch.len() as f64;
        }
        loss_history.push(total / order.len() as f64);
        tracing::debug!(cluster, epoch, loss = loss_history[epoch], "epoch");
    }
    Ok(ForecastModel {
        cluster,
        config: config.clone(),
        input_len: HISTORY_LEN,
        output_len: HORIZON_LEN,
        params: theta,
        loss_history,
        training_cells: Vec::new(),
        provenance: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub cluster: usize,
    pub cell_id: String,
    pub experiment: ExperimentTag,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub max_abs_error: f64,
    /// Same metrics in the cell's raw KPI units.
    pub mse_raw: Option<f64>,
    pub mae_raw: Option<f64>,
    /// Constant over its fit range (excluded from training, still evaluated).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub cells: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// Mean and standard deviation across clusters of the per-cluster means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: ExperimentTag,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: ExperimentTag,
    /// Sorted by (cluster, cell_id).
    pub cells: Vec<CellMetrics>,
    pub clusters: Vec<ClusterSummary>,
    pub summary: SummaryRow,
    /// Clusters that could not take part, e.g. too few members.
    pub skipped_clusters: Vec<usize>,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_cells(experiment: ExperimentTag, mut cells: Vec<CellMetrics>, mut skipped_clusters: Vec<usize>) -> Self {
        cells.sort_by(|a, b| a.cluster.cmp(&b.cluster).then_with(|| a.cell_id.cmp(&b.cell_id)));
        skipped_clusters.sort_unstable();
        let ids: BTreeSet<usize> = cells.iter().map(|c| c.cluster).collect();
        let clusters: Vec<ClusterSummary> = ids
            .into_iter()
            .map(|cluster| {
                let members: Vec<&CellMetrics> = cells.iter().filter(|c| c.cluster == cluster).collect();
                let (mse_mean, mse_std) = mean_std(&members.iter().map(|c| c.mse).collect::<Vec<_>>());
                let (mae_mean, mae_std) = mean_std(&members.iter().map(|c| c.mae).collect::<Vec<_>>());
                ClusterSummary {
                    cluster,
                    cells: members.len(),
                    mse_mean,
                    mse_std,
                    mae_mean,
                    mae_std,
                }
            })
            .collect();
        let (mse_mean, mse_std) = mean_std(&clusters.iter().map(|c| c.mse_mean).collect::<Vec<_>>());
        let (mae_mean, mae_std) = mean_std(&clusters.iter().map(|c| c.mae_mean).collect::<Vec<_>>());
        Self {
            experiment,
            cells,
            clusters,
            summary: SummaryRow {
                experiment,
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
            },
            skipped_clusters,
        }
    }

    /// Merges single-cluster reports of one experiment.
    pub fn combine(experiment: ExperimentTag, reports: impl IntoIterator<Item = MetricsReport>) -> Self {
        let mut cells = Vec::new();
        let mut skipped = Vec::new();
        for r in reports {
            cells.extend(r.cells);
            skipped.extend(r.skipped_clusters);
        }
        Self::from_cells(experiment, cells, skipped)
    }

    pub fn cluster(&self, cluster: usize) -> Option<&ClusterSummary> {
        self.clusters.iter().find(|c| c.cluster == cluster)
    }

    /// `cluster,cell_id,mse,mae,experiment` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cluster", "cell_id", "mse", "mae", "mse_raw", "mae_raw", "experiment"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.cluster.to_string(),
                c.cell_id.clone(),
                c.mse.to_string(),
                c.mae.to_string(),
                opt(c.mse_raw),
                opt(c.mae_raw),
                c.experiment.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per-cluster table followed by the summary row.
    pub fn to_table(&self) -> String {
        let mut out = format!("experiment: {}\n", self.experiment);
        out.push_str("cluster  cells  MSE (mean ± std)       MAE (mean ± std)\n");
        for c in &self.clusters {
            out.push_str(&format!(
                "{:>7}  {:>5}  {:.4} ± {:.4}        {:.4} ± {:.4}\n",
                c.cluster, c.cells, c.mse_mean, c.mse_std, c.mae_mean, c.mae_std
            ));
        }
        let s = &self.summary;
        out.push_str(&format!(
            "{:>7}  {:>5}  {:.4} ± {:.4}        {:.4} ± {:.4}\n",
            "all",
            self.cells.len(),
            s.mse_mean,
            s.mse_std,
            s.mae_mean,
            s.mae_std
        ));
        if !self.skipped_clusters.is_empty() {
            out.push_str(&format!("skipped clusters: {:?}\n", self.skipped_clusters));
        }
        out
    }
}

fn window_errors(predicted: &Array2<f64>, targets: &Array2<f64>) -> (f64, f64, f64) {
    let n = targets.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut max = 0.0f64;
    for (p, t) in predicted.iter().zip(targets) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
        max = max.max(e.abs());
    }
    (se / n, ae / n, max)
}

fn evaluate_one(model: &ForecastModel, cell: &KpiSeries, experiment: ExperimentTag) -> Result<CellMetrics> {
    let w = kpi::make_windows(cell)?;
    let pred = model.predict_batch(w.inputs.view());
    let (mse, mae, max_abs_error) = window_errors(&pred, &w.targets);
    let (mse_raw, mae_raw) = match cell.norm {
        Some(n) => {
            let (m, a, _) = window_errors(&pred.mapv(|v| n.invert(v)), &w.targets.mapv(|v| n.invert(v)));
            (Some(m), Some(a))
        }
        None => (None, None),
    };
    Ok(CellMetrics {
        cluster: model.cluster,
        cell_id: cell.cell_id.clone(),
        experiment,
        windows: w.len(),
        mse,
        mae,
        max_abs_error,
        mse_raw,
        mae_raw,
        degenerate: cell.is_degenerate(),
    })
}

/// Per-cell MSE/MAE over every window of each cell's test segment.
pub fn evaluate_cells(model: &ForecastModel, test_segments: &[KpiSeries], experiment: ExperimentTag) -> Result<MetricsReport> {
    if test_segments.is_empty() {
        return Err(Error::Validation(format!("no cells to evaluate for cluster {}", model.cluster)));
    }
    let cells = test_segments
        .iter()
        .map(|c| evaluate_one(model, c, experiment))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_cells(experiment, cells, Vec::new()))
}

/// MSE of repeating the last history value over the horizon, averaged over
/// every window of `series`.
pub fn persistence_baseline_mse(series: &KpiSeries) -> Result<f64> {
    let w = kpi::make_windows(series)?;
    let pred = Array2::from_shape_fn(w.targets.dim(), |(i, _)| w.inputs[[i, HISTORY_LEN - 1]]);
    Ok(window_errors(&pred, &w.targets).0)
}

/// Members of one cluster after the temporal split.
struct SplitCluster<'a> {
    cluster: usize,
    /// Sorted by cell id.
    cells: Vec<(&'a KpiSeries, KpiSeries, KpiSeries)>,
}

fn split_clusters(members: &BTreeMap<usize, Vec<KpiSeries>>) -> Result<Vec<SplitCluster<'_>>> {
    members
        .iter()
        .map(|(&cluster, series)| {
            let mut cells = series
                .iter()
                .map(|s| {
                    let (train, test) = kpi::temporal_split(s, kpi::TRAIN_FRACTION)?;
                    Ok((s, train, test))
                })
                .collect::<Result<Vec<_>>>()?;
            cells.sort_by(|a, b| a.0.cell_id.cmp(&b.0.cell_id));
            Ok(SplitCluster { cluster, cells })
        })
        .collect()
}

/// Average of the non-degenerate training segments, or `None` when every
/// candidate is degenerate.
fn training_average(cluster: usize, train: &[&KpiSeries]) -> Result<Option<(KpiSeries, Vec<String>)>> {
    let usable: Vec<&KpiSeries> = train.iter().copied().filter(|s| !s.is_degenerate()).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let ids = usable.iter().map(|s| s.cell_id.clone()).collect();
    Ok(Some((kpi::average_of(cluster, &usable)?, ids)))
}

/// Experiment 1: one model per cluster trained on the average of all
/// members' training segments, evaluated on every member's test segment.
pub fn per_cluster_experiment(
    members: &BTreeMap<usize, Vec<KpiSeries>>,
    config: &TrainingConfig,
) -> Result<(MetricsReport, Vec<ForecastModel>)> {
    let clusters = split_clusters(members)?;
    let outcomes = clusters
        .par_iter()
        .map(|sc| -> Result<Option<(MetricsReport, ForecastModel)>> {
            let train: Vec<&KpiSeries> = sc.cells.iter().map(|c| &c.1).collect();
            let Some((avg, ids)) = training_average(sc.cluster, &train)? else {
                return Ok(None);
            };
            let mut model = match train_cluster_model(sc.cluster, &avg, &config.for_cluster(sc.cluster)) {
                Err(Error::DegenerateSeries(_)) => return Ok(None),
                other => other?,
            };
            model.training_cells = ids;
            let tests: Vec<KpiSeries> = sc.cells.iter().map(|c| c.2.clone()).collect();
            let report = evaluate_cells(&model, &tests, ExperimentTag::PerCluster)?;
            Ok(Some((report, model)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for (sc, outcome) in clusters.iter().zip(outcomes) {
        match outcome {
            Some((r, m)) => {
                reports.push(r);
                models.push(m);
            }
            None => skipped.push(sc.cluster),
        }
    }
    let mut report = MetricsReport::combine(ExperimentTag::PerCluster, reports);
    report.skipped_clusters = skipped;
    Ok((report, models))
}

/// `ceil(fraction * members)`, at least one and leaving at least one unmasked.
pub fn mask_count(members: usize, fraction: f64) -> usize {
    ((fraction * members as f64 - 1e-9).ceil() as usize).clamp(1, members.saturating_sub(1).max(1))
}

/// Cells of one cluster hidden from training, chosen by `seed`.
pub fn masked_cells(cell_ids: &[String], cluster: usize, fraction: f64, seed: u64) -> Vec<String> {
    let mut ids = cell_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut seed::rng(seed::derive_index(seed, "mask", cluster)));
    let mut masked = ids[..mask_count(ids.len(), fraction)].to_vec();
    masked.sort();
    masked
}

/// Experiment 2: per cluster, mask `ceil(mask_fraction * m)` cells, train on
/// the average of the rest and evaluate on the masked cells only.
pub fn cold_start_experiment(
    members: &BTreeMap<usize, Vec<KpiSeries>>,
    mask_fraction: f64,
    seed: u64,
    config: &TrainingConfig,
) -> Result<(MetricsReport, Vec<ForecastModel>)> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::Validation(format!("mask fraction {mask_fraction} outside (0, 1)")));
    }
    let clusters = split_clusters(members)?;
    let (eligible, mut skipped): (Vec<_>, Vec<_>) =
        clusters.iter().partition(|sc| sc.cells.len() >= MIN_COLD_START_MEMBERS);
    if eligible.is_empty() {
        return Err(Error::NothingToEvaluate(format!(
            "every cluster has fewer than {MIN_COLD_START_MEMBERS} members"
        )));
    }
    let mut skipped: Vec<usize> = skipped.drain(..).map(|sc| sc.cluster).collect();
    let outcomes = eligible
        .par_iter()
        .map(|sc| -> Result<Option<(MetricsReport, ForecastModel)>> {
            let ids: Vec<String> = sc.cells.iter().map(|c| c.0.cell_id.clone()).collect();
            let masked: BTreeSet<String> = masked_cells(&ids, sc.cluster, mask_fraction, seed).into_iter().collect();
            let train: Vec<&KpiSeries> = sc
                .cells
                .iter()
                .filter(|c| !masked.contains(&c.0.cell_id))
                .map(|c| &c.1)
                .collect();
            let Some((avg, train_ids)) = training_average(sc.cluster, &train)? else {
                return Ok(None);
            };
            let mut model = match train_cluster_model(sc.cluster, &avg, &config.for_cluster(sc.cluster)) {
                Err(Error::DegenerateSeries(_)) => return Ok(None),
                other => other?,
            };
            model.training_cells = train_ids;
            let tests: Vec<KpiSeries> = sc
                .cells
                .iter()
                .filter(|c| masked.contains(&c.0.cell_id))
                .map(|c| c.2.clone())
                .collect();
            let report = evaluate_cells(&model, &tests, ExperimentTag::ColdStart)?;
            Ok(Some((report, model)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for (sc, outcome) in eligible.iter().zip(outcomes) {
        match outcome {
            Some((r, m)) => {
                reports.push(r);
                models.push(m);
            }
            None => skipped.push(sc.cluster),
        }
    }
    let mut report = MetricsReport::combine(ExperimentTag::ColdStart, reports);
    skipped.sort_unstable();
    report.skipped_clusters = skipped;
    Ok((report, models))
}
