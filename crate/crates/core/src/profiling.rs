//! KMeans clustering of coverage embeddings with automatic elbow selection,
//! nearest-centroid assignment, and partition agreement scoring.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::vision::Embedding;

/// Percentile of training distances beyond which an assignment is flagged.
pub const OOD_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            tolerance: 1e-6,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub membership: BTreeMap<String, usize>,
    /// `(k, within-cluster sum of squares)` over the scanned range.
    pub inertia_curve: Vec<(usize, f64)>,
    pub seed: u64,
    pub backbone_name: String,
    /// Distance above which [`ClusterModel::assign_detailed`] flags a point.
    pub ood_threshold: f64,
    /// `"knee"` or `"override"`.
    pub selection: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub cluster: usize,
    pub distance: f64,
    /// Distance exceeds the 99th percentile of training distances.
    pub out_of_distribution: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from `centroids`. Empty clusters are re-seeded at the
/// point farthest from its centroid, so inertia never increases.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansFit {
    let k = centroids.len();
    let dim = points[0].len();
    let mut iterations = 0;
    loop {
        let assigned: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let mut labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i) && counts[labels[*i]] > 1)
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = j;
                    counts[j] = 1;
                    taken.insert(i);
                }
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        iterations += 1;
        if shift <= cfg.tolerance || iterations >= cfg.max_iter {
            break;
        }
    }
    let (labels, inertia) = points.iter().fold((Vec::new(), 0.0), |(mut l, s), p| {
        let (j, d) = nearest(p, &centroids);
        l.push(j);
        (l, s + d)
    });
    KMeansFit {
        centroids,
        labels,
        inertia,
        iterations,
    }
}

/// Best of `cfg.restarts` k-means++ runs plus an optional warm start.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig, warm: Option<Vec<Vec<f64>>>) -> KMeansFit {
    let mut fits: Vec<KMeansFit> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive_index(seed, &format!("kmeans/{k}"), r));
            lloyd(points, kmeans_pp(points, k, &mut rng), cfg)
        })
        .collect();
    if let Some(init) = warm {
        fits.push(lloyd(points, init, cfg));
    }
    // first minimum wins
    fits.into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one restart")
}

/// Chord-distance knee on the curve with both axes scaled to [0, 1].
/// A flat curve selects the smallest k.
pub fn knee(curve: &[(usize, f64)]) -> usize {
    let (k0, k1) = (curve[0].0, curve[curve.len() - 1].0);
    let hi = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    if k1 == k0 || hi - lo <= 1e-12 * hi.abs().max(1e-300) {
        return k0;
    }
    let norm = |&(k, w): &(usize, f64)| ((k - k0) as f64 / (k1 - k0) as f64, (w - lo) / (hi - lo));
    let (x0, y0) = norm(&curve[0]);
    let (x1, y1) = norm(&curve[curve.len() - 1]);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len = dx.hypot(dy);
    let mut best = (k0, f64::NEG_INFINITY);
    for c in curve {
        let (x, y) = norm(c);
        let d = (dx * (y0 - y) - dy * (x0 - x)).abs() / len;
        if d > best.1 + 1e-12 {
            best = (c.0, d);
        }
    }
    best.0
}

/// Linear-interpolation percentile of `values` (`p` in [0, 100]).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

fn check_inputs(embeddings: &[Embedding]) -> Result<usize> {
    let mut seen = HashSet::new();
    for e in embeddings {
        if !seen.insert(e.cell_id.as_str()) {
            return Err(Error::DuplicateCell(e.cell_id.clone()));
        }
    }
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.vector.len(),
            });
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {}", e.cell_id)));
        }
    }
    Ok(dim)
}

/// Scans `k_range`, picks k at the knee of the inertia curve and returns the
/// model fitted at that k.
pub fn fit_clusters(embeddings: &[Embedding], k_range: RangeInclusive<usize>, seed: u64) -> Result<ClusterModel> {
    fit_clusters_with(embeddings, k_range, None, &KMeansConfig::default(), seed)
}

pub fn fit_clusters_with(
    embeddings: &[Embedding],
    k_range: RangeInclusive<usize>,
    k_override: Option<usize>,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<ClusterModel> {
    let (k_min, k_max) = (*k_range.start(), *k_range.end());
    if k_min == 0 || k_min > k_max {
        return Err(Error::Validation(format!("invalid k range [{k_min}, {k_max}]")));
    }
    if let Some(k) = k_override {
        if !k_range.contains(&k) {
            return Err(Error::Validation(format!("k override {k} outside [{k_min}, {k_max}]")));
        }
    }
    check_inputs(embeddings)?;
    if embeddings.len() < k_max {
        return Err(Error::InsufficientData {
            points: embeddings.len(),
            required: k_max,
        });
    }
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();

    let mut fits: Vec<KMeansFit> = Vec::new();
    for k in k_range.clone() {
        let warm = fits.last().map(|prev| {
            let far = (0..points.len())
                .max_by(|&a, &b| {
                    let da = nearest(&points[a], &prev.centroids).1;
                    let db = nearest(&points[b], &prev.centroids).1;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("non-empty");
            let mut init = prev.centroids.clone();
            init.push(points[far].clone());
            init
        });
        fits.push(kmeans(&points, k, seed, cfg, warm));
    }
    let inertia_curve: Vec<(usize, f64)> = k_range.clone().zip(fits.iter().map(|f| f.inertia)).collect();
    let (k, selection) = match k_override {
        Some(k) => (k, "override"),
        None => (knee(&inertia_curve), "knee"),
    };
    let fit = fits.swap_remove(k - k_min);
    let distances: Vec<f64> = points
        .iter()
        .zip(&fit.labels)
        .map(|(p, &l)| sq_dist(p, &fit.centroids[l]).sqrt())
        .collect();
    Ok(ClusterModel {
        k,
        membership: embeddings.iter().map(|e| e.cell_id.clone()).zip(fit.labels.iter().copied()).collect(),
        centroids: fit.centroids,
        inertia_curve,
        seed,
        backbone_name: embeddings.first().map(|e| e.backbone_name.clone()).unwrap_or_default(),
        ood_threshold: percentile(&distances, OOD_PERCENTILE),
        selection: selection.into(),
    })
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign(embedding: &Embedding, model: &ClusterModel) -> Result<usize> {
    Ok(model.assign_detailed(&embedding.vector)?.cluster)
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn assign_detailed(&self, vector: &[f64]) -> Result<Assignment> {
        if vector.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let (cluster, d2) = nearest(vector, &self.centroids);
        let distance = d2.sqrt();
        Ok(Assignment {
            cluster,
            distance,
            out_of_distribution: distance > self.ood_threshold,
        })
    }

    /// Member cell ids per cluster, in cell-id order.
    pub fn members(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.k];
        for (cell, &c) in &self.membership {
            out[c].push(cell.clone());
        }
        out
    }

    /// Writes `centroids.csv`, `membership.csv`, `inertia.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("centroids.csv"))?;
        let mut header = vec!["cluster".to_string()];
        header.extend((0..self.dim()).map(|i| format!("d{i}")));
        w.write_record(&header)?;
        for (j, c) in self.centroids.iter().enumerate() {
            let mut row = vec![j.to_string()];
            row.extend(c.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("membership.csv"))?;
        w.write_record(["cell_id", "cluster"])?;
        for (cell, c) in &self.membership {
            w.write_record([cell.as_str(), &c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("inertia.csv"))?;
        w.write_record(["k", "inertia"])?;
        for (k, i) in &self.inertia_curve {
            w.write_record([k.to_string(), i.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let meta = Meta {
            k: self.k,
            seed: self.seed,
            backbone_name: self.backbone_name.clone(),
            embedding_dim: self.dim(),
            ood_threshold: self.ood_threshold,
            selection: self.selection.clone(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let meta: Meta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let open = |name: &str| {
            let p = dir.join(name);
            csv::Reader::from_path(&p).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(&p, io),
                other => Error::Config(format!("{}: {other:?}", p.display())),
            })
        };
        let mut centroids = Vec::new();
        for row in open("centroids.csv")?.records() {
            let row = row?;
            let v = row
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad centroid value {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            centroids.push(v);
        }
        let mut membership = BTreeMap::new();
        for row in open("membership.csv")?.deserialize::<(String, usize)>() {
            let (cell, c) = row?;
            membership.insert(cell, c);
        }
        let mut inertia_curve = Vec::new();
        for row in open("inertia.csv")?.deserialize::<(usize, f64)>() {
            inertia_curve.push(row?);
        }
        if centroids.len() != meta.k || membership.values().any(|&c| c >= meta.k) {
            return Err(Error::Config(format!("cluster artifacts in {} are inconsistent", dir.display())));
        }
        Ok(Self {
            k: meta.k,
            centroids,
            membership,
            inertia_curve,
            seed: meta.seed,
            backbone_name: meta.backbone_name,
            ood_threshold: meta.ood_threshold,
            selection: meta.selection,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    k: usize,
    seed: u64,
    backbone_name: String,
    embedding_dim: usize,
    ood_threshold: f64,
    selection: String,
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_a * sum_b / choose2(n).max(1.0);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: Vec<f64>) -> Embedding {
        Embedding {
            vector: v,
            cell_id: id.into(),
            backbone_name: "toy".into(),
        }
    }

    /// Pair-counting Rand statistics, independent of the contingency route.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => both += 1.0,
                    (true, false) => only_a += 1.0,
                    (false, true) => only_b += 1.0,
                    (false, false) => neither += 1.0,
                }
            }
        }
        let total: f64 = both + only_a + only_b + neither;
        let expected = (both + only_a) * (both + only_b) / total;
        let max = ((both + only_a) + (both + only_b)) / 2.0;
        (both - expected) / (max - expected)
    }

    #[test]
    fn ari_matches_pair_counting() {
        let a = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let b = [1, 1, 0, 0, 2, 2, 2, 2, 0, 1];
        assert!((adjusted_rand_index(&a, &b) - ari_by_pairs(&a, &b)).abs() < 1e-12);
        let relabeled = [2, 2, 2, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(adjusted_rand_index(&a, &relabeled), 1.0);
    }

    #[test]
    fn identical_points_pick_smallest_k() {
        let e: Vec<_> = (0..8).map(|i| emb(&format!("c{i}"), vec![1.0, 2.0])).collect();
        let m = fit_clusters(&e, 1..=5, 3).unwrap();
        assert!(m.inertia_curve.iter().all(|(_, w)| *w == 0.0));
        assert_eq!(m.k, 1);
    }

    #[test]
    fn knee_of_hand_curve() {
        let curve = [(1, 100.0), (2, 50.0), (3, 5.0), (4, 4.0), (5, 3.5), (6, 3.0)];
        assert_eq!(knee(&curve), 3);
        assert_eq!(knee(&[(2, 7.0)]), 2);
    }

    #[test]
    fn assign_tie_goes_to_lowest_index() {
        let model = ClusterModel {
            k: 6,
            centroids: (0..6).map(|j| vec![j as f64, 0.0]).collect(),
            membership: BTreeMap::new(),
            inertia_curve: vec![],
            seed: 0,
            backbone_name: "toy".into(),
            ood_threshold: 1.0,
            selection: "override".into(),
        };
        let mut m = model.clone();
        m.centroids = vec![vec![5.0, 5.0], vec![0.0, -1.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        m.k = 4;
        assert_eq!(assign(&emb("x", vec![0.0, 0.0]), &m).unwrap(), 1);
        for j in 0..6 {
            assert_eq!(assign(&emb("x", model.centroids[j].clone()), &model).unwrap(), j);
        }
        let far = model.assign_detailed(&[100.0, 0.0]).unwrap();
        assert_eq!(far.cluster, 5);
        assert!(far.out_of_distribution);
        assert!(matches!(
            assign(&emb("x", vec![1.0]), &model),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert!((percentile(&[0.0, 10.0], 99.0) - 9.9).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let e = vec![emb("a", vec![0.0]), emb("a", vec![1.0])];
        assert!(matches!(fit_clusters(&e, 1..=2, 0), Err(Error::DuplicateCell(_))));
        let e = vec![emb("a", vec![0.0]), emb("b", vec![1.0])];
        assert!(matches!(
            fit_clusters(&e, 1..=3, 0),
            Err(Error::InsufficientData { points: 2, required: 3 })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let e: Vec<_> = (0..12).map(|i| emb(&format!("c{i:02}"), vec![(i % 3) as f64 * 10.0 + i as f64 * 0.01, 0.5])).collect();
        let m = fit_clusters(&e, 1..=4, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(ClusterModel::load(dir.path()).unwrap(), m);
    }
}
