//! Coverage-area profiling and cluster-level KPI forecasting for cellular networks.
//!
//! The crate turns each cell's antenna configuration into a georeferenced
//! coverage box, crops the matching satellite patch, embeds it with a vision
//! backbone, clusters the embeddings, and trains one recurrent forecaster per
//! cluster on the cluster-average KPI series. New sites without history are
//! forecast by assigning their coverage embedding to the nearest cluster.

pub mod error;
pub mod forecast;
pub mod geometry;
pub mod kpi;
pub mod pipeline;
pub mod profiling;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod vision;

pub use error::{Error, Result};
pub use forecast::{
    cold_start_experiment, evaluate_cells, persistence_baseline_mse, train_cluster_model,
    ExperimentTag, ForecastModel, MetricsReport, TrainingConfig,
};
pub use geometry::{normalize_azimuth, sector_box, BoundingBox, CellConfig, CoverageBox, LatLon};
pub use kpi::{cluster_average, make_windows, normalize, temporal_split, KpiSeries, NormParams, WindowSet};
pub use pipeline::{run_pipeline, what_if, PipelineConfig, PipelineRun, RunSnapshot, WhatIfRequest, WhatIfResponse};
pub use profiling::{adjusted_rand_index, assign, fit_clusters, ClusterModel};
pub use raster::{extract_patch, make_synthetic_tile, GeoTransform, ImagePatch, LandCover, RasterStore, RasterTile};
pub use vision::{benchmark_backbones, BackboneSpec, BenchmarkReport, Embedding, VisionModel};

/// History length fed to the forecaster (24 h at 15-minute sampling).
pub const HISTORY_LEN: usize = 96;
/// Forecast horizon (8 h at 15-minute sampling).
pub const HORIZON_LEN: usize = 32;
/// Smallest series that yields one (history, horizon) window.
pub const WINDOW_LEN: usize = HISTORY_LEN + HORIZON_LEN;
/// KPI sampling period in seconds.
pub const SAMPLE_PERIOD_S: i64 = 900;
/// Side length of every image patch fed to a backbone.
pub const PATCH_SIZE: usize = 64;
