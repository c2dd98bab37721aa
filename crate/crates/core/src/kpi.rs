//! KPI time series: ingestion, Min-Max normalization, supervised windows,
//! temporal split and cluster averaging.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{HISTORY_LEN, HORIZON_LEN, SAMPLE_PERIOD_S, WINDOW_LEN};

/// Out-of-fit-range normalized values are clamped to this interval.
pub const CLAMP_RANGE: (f64, f64) = (-0.5, 1.5);
/// Shortest series `temporal_split` accepts.
pub const MIN_SPLIT_LEN: usize = 160;
pub const TRAIN_FRACTION: f64 = 0.8;
/// Longest run of missing samples the opt-in gap filler bridges.
pub const MAX_GAP_FILL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub min: f64,
    pub max: f64,
    /// `max == min` over the fit range; every value maps to 0.
    pub degenerate: bool,
}

impl NormParams {
    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            min,
            max,
            degenerate: max <= min,
        }
    }

    /// Unclamped forward transform.
    pub fn apply(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            y * (self.max - self.min) + self.min
        }
    }
}

/// One cell's series on a uniform 15-minute grid starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiSeries {
    pub cell_id: String,
    pub start: DateTime<Utc>,
    pub values: Vec<f64>,
    /// Set once the series is normalized.
    pub norm: Option<NormParams>,
    /// Values clamped during normalization.
    pub clamped: usize,
    /// Samples inserted by the gap filler.
    pub filled: usize,
}

impl KpiSeries {
    pub fn new(cell_id: impl Into<String>, start: DateTime<Utc>, values: Vec<f64>) -> Self {
        Self {
            cell_id: cell_id.into(),
            start,
            values,
            norm: None,
            clamped: 0,
            filled: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(SAMPLE_PERIOD_S * i as i64)
    }

    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        (0..self.len()).map(|i| self.timestamp(i)).collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm.is_some_and(|n| n.degenerate)
    }

    /// Sub-series `[range.start, range.end)`, keeping normalization metadata.
    pub fn slice(&self, range: Range<usize>) -> KpiSeries {
        KpiSeries {
            start: self.timestamp(range.start),
            values: self.values[range].to_vec(),
            ..self.clone()
        }
    }

    /// Back to raw units; identity when the series is not normalized.
    pub fn denormalize(&self) -> Vec<f64> {
        match self.norm {
            Some(n) => self.values.iter().map(|&y| n.invert(y)).collect(),
            None => self.values.clone(),
        }
    }
}

/// Min-Max normalization with parameters fitted on `fit_range`. Values
/// outside the fit range are clamped to [`CLAMP_RANGE`] and counted.
pub fn normalize(series: &KpiSeries, fit_range: Range<usize>) -> Result<KpiSeries> {
    if fit_range.is_empty() || fit_range.end > series.len() {
        return Err(Error::Validation(format!(
            "fit range {fit_range:?} is empty or exceeds series length {}",
            series.len()
        )));
    }
    if let Some(i) = series.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} sample {i}", series.cell_id)));
    }
    let params = NormParams::fit(&series.values[fit_range.clone()]);
    if params.degenerate {
        tracing::warn!(cell = %series.cell_id, value = params.min, "constant series over fit range");
    }
    let mut clamped = 0;
    let values = series
        .values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = params.apply(x);
            if fit_range.contains(&i) {
                y
            } else {
                let c = y.clamp(CLAMP_RANGE.0, CLAMP_RANGE.1);
                if c != y {
                    clamped += 1;
                }
                c
            }
        })
        .collect();
    Ok(KpiSeries {
        values,
        norm: Some(params),
        clamped,
        ..series.clone()
    })
}

/// Supervised (history, horizon) pairs with stride one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// Index of each window's first history sample in the source series.
    pub origin_indices: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origin_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_indices.is_empty()
    }
}

pub fn window_count(len: usize) -> usize {
    (len + 1).saturating_sub(WINDOW_LEN)
}

pub fn make_windows(series: &KpiSeries) -> Result<WindowSet> {
    windows_of(&series.values)
}

pub fn windows_of(values: &[f64]) -> Result<WindowSet> {
    if values.len() < WINDOW_LEN {
        return Err(Error::TooShort {
            needed: WINDOW_LEN,
            got: values.len(),
        });
    }
    let n = window_count(values.len());
    let inputs = Array2::from_shape_fn((n, HISTORY_LEN), |(i, j)| values[i + j]);
    let targets = Array2::from_shape_fn((n, HORIZON_LEN), |(i, j)| values[i + HISTORY_LEN + j]);
    Ok(WindowSet {
        inputs,
        targets,
        origin_indices: (0..n).collect(),
    })
}

/// Temporal split: the first `floor(train_fraction * T)` samples train.
pub fn temporal_split(series: &KpiSeries, train_fraction: f64) -> Result<(KpiSeries, KpiSeries)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    if series.len() < MIN_SPLIT_LEN {
        return Err(Error::TooShort {
            needed: MIN_SPLIT_LEN,
            got: series.len(),
        });
    }
    let cut = split_point(series.len(), train_fraction);
    Ok((series.slice(0..cut), series.slice(cut..series.len())))
}

pub fn split_point(len: usize, train_fraction: f64) -> usize {
    (train_fraction * len as f64).floor() as usize
}

/// Pointwise mean of each cluster's members. At every timestamp the member
/// values are summed in sorted order, so the result does not depend on
/// member order. Norm params of the result average the members' params.
pub fn cluster_average(series_set: &BTreeMap<usize, Vec<KpiSeries>>) -> Result<BTreeMap<usize, KpiSeries>> {
    series_set
        .iter()
        .map(|(&cluster, members)| Ok((cluster, average_impl(cluster, members.iter())?)))
        .collect()
}

/// Average of borrowed member series; see [`cluster_average`].
pub fn average_of(cluster: usize, members: &[&KpiSeries]) -> Result<KpiSeries> {
    average_impl(cluster, members.iter().copied())
}

fn average_impl<'a>(cluster: usize, members: impl Iterator<Item = &'a KpiSeries> + Clone) -> Result<KpiSeries> {
    let mut it = members.clone();
    let first = it
        .next()
        .ok_or_else(|| Error::Validation(format!("cluster {cluster} has no member series")))?;
    for s in it {
        if s.start != first.start || s.len() != first.len() {
            return Err(Error::Alignment(format!(
                "cluster {cluster}: {} starts {} with {} samples, {} starts {} with {}",
                first.cell_id,
                first.start,
                first.len(),
                s.cell_id,
                s.start,
                s.len()
            )));
        }
    }
    let members: Vec<&KpiSeries> = members.collect();
    let mut column = Vec::with_capacity(members.len());
    let values = (0..first.len())
        .map(|t| {
            column.clear();
            column.extend(members.iter().map(|s| s.values[t]));
            column.sort_by(f64::total_cmp);
            let mut mean = 0.0;
            for (i, &x) in column.iter().enumerate() {
                mean += (x - mean) / (i + 1) as f64;
            }
            mean.clamp(column[0], column[column.len() - 1])
        })
        .collect();
    let norms: Vec<NormParams> = members.iter().filter_map(|s| s.norm).collect();
    let norm = (norms.len() == members.len()).then(|| {
        let n = norms.len() as f64;
        let min = norms.iter().map(|p| p.min).sum::<f64>() / n;
        let max = norms.iter().map(|p| p.max).sum::<f64>() / n;
        NormParams {
            min,
            max,
            degenerate: max <= min,
        }
    });
    Ok(KpiSeries {
        cell_id: format!("cluster_{cluster}"),
        start: first.start,
        values,
        norm,
        clamped: 0,
        filled: 0,
    })
}

fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map(|t| t.and_utc())
        .map_err(|_| Error::Validation(format!("unparseable timestamp {s:?}")))
}

#[derive(Debug, Deserialize, Serialize)]
struct KpiRow {
    cell_id: String,
    timestamp: String,
    kpi_name: String,
    value: f64,
}

/// Reads `cell_id,timestamp,kpi_name,value` rows for one KPI. Each cell's
/// samples must sit on a gap-free 15-minute grid unless `gap_fill` is set,
/// in which case runs of up to [`MAX_GAP_FILL`] missing samples are
/// forward-filled and counted in [`KpiSeries::filled`].
pub fn read_kpis(path: &Path, kpi_name: &str, gap_fill: bool) -> Result<Vec<KpiSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{}: {other:?}", path.display())),
        })?;
    let mut per_cell: BTreeMap<String, Vec<(DateTime<Utc>, f64)>> = BTreeMap::new();
    for row in reader.deserialize::<KpiRow>() {
        let row = row?;
        if row.kpi_name != kpi_name {
            continue;
        }
        if !row.value.is_finite() {
            return Err(Error::NonFinite(format!("{} at {}", row.cell_id, row.timestamp)));
        }
        per_cell
            .entry(row.cell_id)
            .or_default()
            .push((parse_timestamp(&row.timestamp)?, row.value));
    }
    per_cell
        .into_iter()
        .map(|(cell, mut samples)| {
            samples.sort_by_key(|s| s.0);
            assemble(cell, &samples, gap_fill)
        })
        .collect()
}

fn assemble(cell_id: String, samples: &[(DateTime<Utc>, f64)], gap_fill: bool) -> Result<KpiSeries> {
    let step = Duration::seconds(SAMPLE_PERIOD_S);
    let mut values = vec![samples[0].1];
    let mut filled = 0;
    for pair in samples.windows(2) {
        let (t0, t1) = (pair[0].0, pair[1].0);
        let delta = t1 - t0;
        if delta.num_seconds() % SAMPLE_PERIOD_S != 0 || delta < step {
            return Err(Error::Validation(format!(
                "{cell_id}: samples at {t0} and {t1} are not on a 15-minute grid"
            )));
        }
        let missing = (delta.num_seconds() / SAMPLE_PERIOD_S - 1) as usize;
        if missing > 0 {
            if !gap_fill || missing > MAX_GAP_FILL {
                return Err(Error::Gap {
                    cell_id,
                    after: t0.to_rfc3339(),
                });
            }
            values.extend(std::iter::repeat_n(pair[0].1, missing));
            filled += missing;
        }
        values.push(pair[1].1);
    }
    let mut s = KpiSeries::new(cell_id, samples[0].0, values);
    s.filled = filled;
    Ok(s)
}

/// Writes raw series in the ingestion format.
pub fn write_kpis(path: &Path, kpi_name: &str, series: &[KpiSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in series {
        for (i, &v) in s.values.iter().enumerate() {
            w.serialize(KpiRow {
                cell_id: s.cell_id.clone(),
                timestamp: s.timestamp(i).to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                kpi_name: kpi_name.to_string(),
                value: v,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap()
    }

    fn series(values: Vec<f64>) -> KpiSeries {
        KpiSeries::new("c", t0(), values)
    }

    #[test]
    fn normalize_examples() {
        let s = normalize(&series(vec![2.0, 10.0, 6.0]), 0..3).unwrap();
        assert_eq!(s.values, vec![0.0, 1.0, 0.5]);
        let c = normalize(&series(vec![7.0; 5]), 0..5).unwrap();
        assert_eq!(c.values, vec![0.0; 5]);
        let n = c.norm.unwrap();
        assert_eq!((n.min, n.max, n.degenerate), (7.0, 7.0, true));
    }

    #[test]
    fn out_of_range_values_are_clamped_and_counted() {
        let s = normalize(&series(vec![0.0, 10.0, 30.0, -20.0, 5.0]), 0..2).unwrap();
        assert_eq!(s.values, vec![0.0, 1.0, 1.5, -0.5, 0.5]);
        assert_eq!(s.clamped, 2);
        assert!(matches!(normalize(&series(vec![f64::NAN]), 0..1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn window_examples() {
        for (t, n) in [(128, 1), (500, 373), (5856, 5729)] {
            assert_eq!(make_windows(&series(vec![0.0; t])).unwrap().len(), n);
        }
        let ramp = make_windows(&series((0..200).map(f64::from).collect())).unwrap();
        assert_eq!(ramp.inputs[[0, 95]], 95.0);
        assert_eq!(ramp.targets[[0, 0]], 96.0);
        assert_eq!(ramp.targets[[72, 31]], 199.0);
        let err = make_windows(&series(vec![0.0; 100])).unwrap_err();
        assert!(err.to_string().contains("short by 28"), "{err}");
    }

    #[test]
    fn split_examples() {
        let (a, b) = temporal_split(&series(vec![0.0; 1000]), 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (800, 200));
        assert_eq!(b.start, t0() + Duration::minutes(15 * 800));
        let (a, b) = temporal_split(&series(vec![0.0; 5856]), 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (4684, 1172));
        assert!(matches!(
            temporal_split(&series(vec![0.0; 159]), 0.8),
            Err(Error::TooShort { needed: 160, got: 159 })
        ));
    }

    #[test]
    fn cluster_average_examples() {
        let zeros = series(vec![0.0; 10]);
        let ones = series(vec![1.0; 10]);
        let mut set = BTreeMap::new();
        set.insert(0, vec![zeros.clone(), ones.clone()]);
        set.insert(1, vec![ones.clone(), ones.clone()]);
        let avg = cluster_average(&set).unwrap();
        assert_eq!(avg[&0].values, vec![0.5; 10]);
        assert_eq!(avg[&1].values, ones.values);

        let mut late = ones.clone();
        late.start += Duration::minutes(15);
        set.insert(2, vec![zeros, late]);
        assert!(matches!(cluster_average(&set), Err(Error::Alignment(_))));
    }

    #[test]
    fn csv_round_trip_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kpi.csv");
        let mut a = series((0..10).map(f64::from).collect());
        a.cell_id = "a".into();
        write_kpis(&path, "traffic", &[a.clone()]).unwrap();
        let back = read_kpis(&path, "traffic", false).unwrap();
        assert_eq!(back, vec![a]);
        assert!(read_kpis(&path, "other", false).unwrap().is_empty());

        // drop samples 3 and 4
        let text = std::fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 4 && *i != 5).map(|l| l.1).collect();
        std::fs::write(&path, kept.join("\n")).unwrap();
        assert!(matches!(read_kpis(&path, "traffic", false), Err(Error::Gap { .. })));
        let filled = read_kpis(&path, "traffic", true).unwrap();
        assert_eq!(filled[0].filled, 2);
        assert_eq!(&filled[0].values[..6], &[0.0, 1.0, 2.0, 2.0, 2.0, 5.0]);
    }
}
