use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("latitude {latitude} is too close to a pole (|lat| must be <= 89.9)")]
    PolarUnsupported { latitude: f64 },

    #[error("bounding box lies outside the raster extent")]
    OutOfExtent,

    #[error("raster covers only part of the bounding box: {missing_fraction:.4} of its area is missing")]
    InsufficientCoverage { missing_fraction: f64 },

    #[error("invalid land-cover layout: {0}")]
    LayoutValidation(String),

    #[error("season tag mismatch: expected {expected:?}, found {found:?} in {tile}")]
    SeasonMismatch { expected: String, found: String, tile: String },

    #[error("class {class:?} has {count} example(s); at least 2 are needed for a stratified split")]
    Stratification { class: String, count: usize },

    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),

    #[error("backbone {0:?} has no weights loaded")]
    NotInitialized(String),

    #[error("insufficient data: {points} point(s) for {required} cluster(s)")]
    InsufficientData { points: usize, required: usize },

    #[error("duplicate cell id {0:?}")]
    DuplicateCell(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("series too short: need {needed} samples, got {got} (short by {})", needed - got)]
    TooShort { needed: usize, got: usize },

    #[error("timestamp grids disagree: {0}")]
    Alignment(String),

    #[error("series {0:?} is constant; constant series are excluded from training")]
    DegenerateSeries(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing samples in series {cell_id:?} after {after}")]
    Gap { cell_id: String, after: String },

    #[error("nothing to evaluate: {0}")]
    NothingToEvaluate(String),

    #[error("scenario is useless as an oracle: {0}")]
    OracleUseless(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("run is not ready: {0}")]
    NotReady(String),

    #[error("run directory is locked by another run: {}", .0.display())]
    Locked(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Stable snake_case name, used in HTTP error bodies.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::PolarUnsupported { .. } => "polar_unsupported",
            Error::OutOfExtent => "out_of_extent",
            Error::InsufficientCoverage { .. } => "insufficient_coverage",
            Error::LayoutValidation(_) => "layout_validation",
            Error::SeasonMismatch { .. } => "season_mismatch",
            Error::Stratification { .. } => "stratification",
            Error::UnknownBackbone(_) => "unknown_backbone",
            Error::NotInitialized(_) => "not_initialized",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::DuplicateCell(_) => "duplicate_cell",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TooShort { .. } => "too_short",
            Error::Alignment(_) => "alignment",
            Error::DegenerateSeries(_) => "degenerate_series",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Gap { .. } => "gap",
            Error::NothingToEvaluate(_) => "nothing_to_evaluate",
            Error::OracleUseless(_) => "oracle_useless",
            Error::Stage { source, .. } => source.name(),
            Error::NotReady(_) => "not_ready",
            Error::Locked(_) => "locked",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}
